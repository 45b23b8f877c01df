"""End-to-end scenario runs at toy scale: artifacts, row counts and determinism."""

import json
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from app.schemas.config import ExperimentConfig
from app.services.mnist import IMAGE_MAGIC, LABEL_MAGIC
from app.services.reporting import MetricRow, read_metrics_csv
from app.services.scenarios import run_scenario
from app.services.site_pool import ThreadedSitePool

SMALL: dict[str, object] = {
    "sites": 3,
    "samples_per_site": 10,
    "dim": 6,
    "atoms": 8,
    "sparsity": 2,
    "dict_iters": 2,
    "power_iters": 3,
    "consensus_iters": 3,
    "edge_prob": 1.0,
}


def _config(scenario: str, out: Path, **overrides: object) -> ExperimentConfig:
    values: dict[str, object] = {"scenario": scenario, "seed": 11, "out": out, **SMALL}
    values.update(overrides)
    return ExperimentConfig.model_validate(values)


def _select(rows: list[MetricRow], **match: object) -> list[MetricRow]:
    return [r for r in rows if all(getattr(r, k) == v for k, v in match.items())]


class TestSynthCompare:
    """Centralized, budget-matched, cloud and local curves over one network."""

    def test_artifacts(self, tmp_path: Path) -> None:
        result = run_scenario(_config("synth-compare", tmp_path))
        assert result.seeds == [11]
        assert result.files["metrics.csv"] == 4 * 2 + 2
        assert result.files["cloud_trace_run0.csv"] == 8 * 2 * 3
        assert (tmp_path / "network_run0").is_dir()

        rows = read_metrics_csv(tmp_path / "metrics.csv")
        for method in ("centralized", "centralized_budget", "cloud", "local"):
            curve = _select(rows, method=method, metric="representation_error")
            assert [r.iteration for r in curve] == [1, 2]
        messages = _select(rows, metric="messages")
        assert messages[0].value > 0

        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["scenario"] == "synth-compare"
        assert manifest["seeds"] == [11]
        assert manifest["files"] == result.files
        assert manifest["config"]["atoms"] == 8

    def test_same_seed_same_bytes(self, tmp_path: Path) -> None:
        run_scenario(_config("synth-compare", tmp_path / "a"))
        run_scenario(_config("synth-compare", tmp_path / "b"), pool=ThreadedSitePool(3))
        first = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert first == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_trials_use_consecutive_seeds(self, tmp_path: Path) -> None:
        result = run_scenario(_config("synth-compare", tmp_path, trials=2))
        assert result.seeds == [11, 12]
        rows = read_metrics_csv(tmp_path / "metrics.csv")
        assert {r.run for r in rows} == {0, 1}
        assert "cloud_trace_run1.csv" in result.files
        assert (tmp_path / "network_run1").is_dir()


class TestDpmFloor:
    def test_curves(self, tmp_path: Path) -> None:
        cfg = _config(
            "dpm-floor",
            tmp_path,
            dim=5,
            sites=4,
            power_iters=6,
            floor_consensus_grid=(2, 5),
            floor_tail=3,
        )
        result = run_scenario(cfg)
        assert result.files["metrics.csv"] == 6 + 2 * (2 * 6 + 1)

        rows = read_metrics_csv(tmp_path / "metrics.csv")
        central = [r.value for r in _select(rows, method="power_method")]
        assert len(central) == 6
        assert np.all(np.diff(central) <= 1e-12)

        # Every site averages exactly in one round on a complete graph.
        exact = [r.value for r in _select(rows, param="T_c=5", metric="eigenvector_error")]
        np.testing.assert_allclose(exact, central, atol=1e-8)

        mean = [r.value for r in _select(rows, param="T_c=2", metric="eigenvector_error")]
        worst = [r.value for r in _select(rows, param="T_c=2", metric="eigenvector_error_max")]
        assert len(mean) == len(worst) == 6
        assert all(m <= w + 1e-15 for m, w in zip(mean, worst, strict=True))

        floor = _select(rows, param="T_c=2", metric="error_floor")[0]
        tail = [r.value for r in _select(rows, param="T_c=2", metric="eigenvector_error")][-3:]
        assert floor.value == pytest.approx(float(np.median(tail)))


class TestAtomError:
    def test_grid_rows(self, tmp_path: Path) -> None:
        cfg = _config(
            "atom-error", tmp_path, atom_power_grid=(2, 3), atom_consensus_grid=(1,)
        )
        result = run_scenario(cfg)
        assert result.files["metrics.csv"] == 2 * (2 + 1)
        rows = read_metrics_csv(tmp_path / "metrics.csv")
        assert {r.param for r in rows} == {"T_p=2 T_c=1", "T_p=3 T_c=1"}
        assert all(r.value >= 0.0 for r in _select(rows, metric="atom_error"))


class TestOnline:
    def test_buffer_and_period_rows(self, tmp_path: Path) -> None:
        cfg = _config(
            "online", tmp_path, periods=3, batch_size=10, buffer_limit=15, period_iters=2
        )
        result = run_scenario(cfg)
        assert result.files["metrics.csv"] == 3 * (2 + 4)
        rows = read_metrics_csv(tmp_path / "metrics.csv")
        assert [r.value for r in _select(rows, metric="buffer_size")] == [10.0, 15.0, 15.0]
        plateaus = _select(rows, metric="iterations_to_plateau")
        assert all(1 <= r.value <= 2 for r in plateaus)

    def test_first_period_takes_longest_to_settle(self, tmp_path: Path) -> None:
        cfg = _config(
            "online",
            tmp_path,
            dim=8,
            atoms=10,
            periods=3,
            batch_size=60,
            buffer_limit=120,
            period_iters=25,
            noise_var=0.01,
        )
        run_scenario(cfg)
        rows = read_metrics_csv(tmp_path / "metrics.csv")
        plateaus = [r.value for r in _select(rows, metric="iterations_to_plateau")]
        assert len(plateaus) == 3
        # The cold start settles before the period ends, warm starts no later.
        assert 1 < plateaus[0] < cfg.period_iters
        assert all(later <= plateaus[0] for later in plateaus[1:])


class TestConstants:
    def test_params_report(self, tmp_path: Path) -> None:
        cfg = _config(
            "constants",
            tmp_path,
            dim=8,
            atoms=12,
            sites=3,
            samples_per_site=12,
            sparsity=2,
        )
        result = run_scenario(cfg)
        assert result.files["metrics.csv"] == 3 * 2 + 8 + 8
        assert result.files["params.json"] == 1
        assert result.files["params.csv"] > 0

        report = json.loads((tmp_path / "params.json").read_text(encoding="utf-8"))
        params = report["runs"]
        assert params[0]["power_iters"] == 3
        assert params[0]["required_Tp"] >= 1
        assert params[0]["c3"] >= 1.0

        rows = read_metrics_csv(tmp_path / "metrics.csv")
        agreement = [r.value for r in _select(rows, metric="support_agreement")]
        assert all(0.0 <= value <= 1.0 for value in agreement)


class TestMnistScenario:
    def test_detection_rows(self, tmp_path: Path, write_idx: Callable[..., Path]) -> None:
        count = 8
        pixels = np.random.default_rng(5).integers(0, 256, size=count * 784, dtype=np.uint8)
        images = write_idx("images", IMAGE_MAGIC, (count, 28, 28), pixels.tobytes())
        labels = write_idx("labels", LABEL_MAGIC, (count,), bytes([4] * count))
        cfg = _config(
            "mnist",
            tmp_path / "out",
            mnist_images=images,
            mnist_labels=labels,
            digits=(4,),
            train_per_class=6,
            test_per_class=2,
            sites=2,
            dim=256,
            atoms=3,
            sparsity=1,
            dict_iters=1,
            power_iters=2,
            consensus_iters=2,
        )
        result = run_scenario(cfg)
        assert result.files["metrics.csv"] == 4
        rows = read_metrics_csv(tmp_path / "out" / "metrics.csv")
        assert {r.param for r in rows} == {"digit=4"}
        assert all(r.value == 1.0 for r in rows)
