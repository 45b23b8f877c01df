"""Tests for the CSV and JSON artifacts."""

import csv
import json
from pathlib import Path

import numpy as np

from app.schemas.config import CloudConfig
from app.schemas.reports import AnalysisParams, RunManifest
from app.services.cloud_ksvd import cloud_ksvd_run
from app.services.network import WeightMatrix
from app.services.reporting import (
    CSV_HEADER,
    PARAMS_HEADER,
    TRACE_HEADER,
    MetricRow,
    read_metrics_csv,
    write_cloud_trace_csv,
    write_manifest,
    write_metrics_csv,
    write_params_report,
)
from app.services.synthetic import SyntheticSites


PARAMS = {
    "c1": 0.1, "c2_prime": 0.5, "c2": 0.4, "c3_prime": 0.5, "c3": 1.0, "c4": 1.0,
    "alpha": 2.0, "beta": 1.0, "gamma": 1.5, "mu": 1.0, "nu": 0.5, "zeta": 3.0,
    "epsilon": 0.1, "epsilon_param": 0.01, "delta_d": 0.01, "delta_d_clamped": False,
    "tau_min": 0.2, "eta_tau_max": 2.0, "T_mix": 3, "power_iters": 5, "required_Tp": 40,
    "consensus_order": 12.5, "c2_mode": "exhaustive",
}  # fmt: skip


class TestMetricsCsv:
    """Long-format metric rows."""

    def test_header_and_row_count(self, tmp_path: Path) -> None:
        rows = [MetricRow(0, "cloud", "", t, "representation_error", 0.1 / t) for t in (1, 2, 3)]
        path = tmp_path / "out" / "metrics.csv"
        assert write_metrics_csv(path, rows) == 3
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) == 4

    def test_floats_survive_exactly(self, tmp_path: Path) -> None:
        rows = [MetricRow(1, "dpm", "T_c=3", 4, "eigenvector_error", 1 / 3)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        assert read_metrics_csv(path) == rows

    def test_empty_run_writes_header_only(self, tmp_path: Path) -> None:
        path = tmp_path / "metrics.csv"
        assert write_metrics_csv(path, []) == 0
        assert path.read_text(encoding="utf-8") == ",".join(CSV_HEADER) + "\n"


class TestManifest:
    def test_manifest_is_json(self, tmp_path: Path) -> None:
        manifest = RunManifest(
            scenario="online",
            code_version="0.1.0",
            seeds=[3, 4],
            config={"dim": 20},
            files={"metrics.csv": 12},
        )
        path = tmp_path / "manifest.json"
        write_manifest(path, manifest)
        loaded = json.loads(path.read_text(encoding="utf-8"))
        assert loaded["seeds"] == [3, 4]
        assert loaded["files"] == {"metrics.csv": 12}
        assert RunManifest.model_validate(loaded) == manifest


class TestCloudTraceCsv:
    def test_one_row_per_atom_and_site(
        self, tmp_path: Path, small_sites: SyntheticSites, ring_weights: WeightMatrix
    ) -> None:
        sites = [*small_sites.sites, small_sites.sites[0]]
        cfg = CloudConfig(n_atoms=12, dict_iters=2, power_iters=2, consensus_iters=2, seed=1)
        _, trace = cloud_ksvd_run(sites, ring_weights, cfg)
        path = tmp_path / "trace.csv"
        assert write_cloud_trace_csv(path, trace) == 2 * 12 * 4
        with path.open(encoding="utf-8", newline="") as handle:
            records = list(csv.DictReader(handle))
        assert tuple(records[0]) == TRACE_HEADER
        supports = np.array([int(r["support_size"]) for r in records if r["iteration"] == "1"])
        assert supports.sum() <= cfg.coding.sparsity * sum(trace.site_sizes)

    def test_site_spread_vanishes_after_long_consensus(
        self, tmp_path: Path, small_sites: SyntheticSites, ring_weights: WeightMatrix
    ) -> None:
        sites = [*small_sites.sites, small_sites.sites[0]]
        cfg = CloudConfig(n_atoms=12, dict_iters=1, power_iters=3, consensus_iters=200, seed=1)
        _, trace = cloud_ksvd_run(sites, ring_weights, cfg)
        path = tmp_path / "trace.csv"
        write_cloud_trace_csv(path, trace)
        with path.open(encoding="utf-8", newline="") as handle:
            spreads = [float(r["site_spread"]) for r in csv.DictReader(handle)]
        assert len(spreads) == 12 * 4
        assert max(spreads) < 1e-8


class TestParamsReport:
    """Stability parameters labeled with their formulas."""

    def test_every_value_carries_its_formula(self, tmp_path: Path) -> None:
        params = [
            AnalysisParams.model_validate(PARAMS),
            AnalysisParams.model_validate({**PARAMS, "nu": 0.25}),
        ]
        files = write_params_report(tmp_path, params)
        assert files == {"params.json": 2, "params.csv": 2 * len(PARAMS)}

        report = json.loads((tmp_path / "params.json").read_text(encoding="utf-8"))
        assert set(report["formulas"]) == set(PARAMS)
        assert all(report["formulas"].values())
        assert report["formulas"]["nu"] == "max lambda2 / lambda1 of sum_i M_i"
        assert report["runs"][1]["nu"] == 0.25

        with (tmp_path / "params.csv").open(encoding="utf-8", newline="") as handle:
            records = list(csv.DictReader(handle))
        assert tuple(records[0]) == PARAMS_HEADER
        assert all(r["formula"] == report["formulas"][r["name"]] for r in records)
        nu_rows = [r for r in records if r["name"] == "nu"]
        assert [float(r["value"]) for r in nu_rows] == [0.5, 0.25]
