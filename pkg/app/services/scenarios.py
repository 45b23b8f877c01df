"""Experiment scenarios: each turns an ``ExperimentConfig`` into CSV curves on disk.

Every scenario is repeated for ``cfg.trials`` runs with seeds ``seed, seed+1,
...``; the CSV ``run`` column is the trial index. Outputs land in ``cfg.out``
next to a ``manifest.json`` that records the config, seeds and row counts.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import structlog

from app import __version__
from app.logging_config import trial_context
from app.schemas.config import CloudConfig, CodingConfig, ExperimentConfig, KsvdConfig
from app.schemas.reports import AnalysisParams, RunManifest
from app.services.cloud_ksvd import cloud_ksvd_run, distributed_power_method, matched_ksvd_config
from app.services.diagnostics import (
    atom_deviation,
    avg_atom_error,
    compute_ksvd_constants,
    compute_theorem1_params,
    error_floor,
    iterations_to_plateau,
    projector_distance,
    support_agreement,
)
from app.services.dictionary_learning import run_ksvd, run_local_ksvd, run_online_ksvd
from app.services.linalg import FloatArray, power_method, reference_top_eigenpair
from app.services.mnist import run_mnist_pipeline
from app.services.network import (
    WeightMatrix,
    gen_erdos_renyi_connected,
    local_degree_weights,
    save_network,
)
from app.services.reporting import (
    MetricRow,
    write_cloud_trace_csv,
    write_manifest,
    write_metrics_csv,
    write_params_report,
)
from app.services.seeding import STREAM_PARTS, STREAM_POWER_INIT, stream, unit_gaussian
from app.services.site_pool import SerialSitePool, SitePool
from app.services.synthetic import gen_synthetic_sites, generate_sites

logger = structlog.get_logger()

METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
# Scale of the per-site noise added to the shared rank-one part in dpm-floor.
DPM_PART_NOISE = 0.05


@dataclass
class ScenarioResult:
    scenario: str
    directory: Path
    seeds: list[int]
    files: dict[str, int] = field(default_factory=dict)


@dataclass
class _Trial:
    """Per-trial context handed to every scenario body."""

    cfg: ExperimentConfig
    run: int
    seed: int
    pool: SitePool
    directory: Path
    files: dict[str, int]
    params: list[AnalysisParams]

    def row(self, method: str, param: str, iteration: int, metric: str, value: float) -> MetricRow:
        return MetricRow(self.run, method, param, iteration, metric, float(value))

    def curve(self, method: str, param: str, metric: str, values: list[float]) -> list[MetricRow]:
        return [self.row(method, param, t, metric, v) for t, v in enumerate(values, start=1)]


def _coding(cfg: ExperimentConfig, method: Literal["omp", "lasso"] = "omp") -> CodingConfig:
    return CodingConfig(sparsity=cfg.sparsity, method=method)


def _ksvd_config(cfg: ExperimentConfig, seed: int, **overrides: object) -> KsvdConfig:
    values: dict[str, object] = {
        "n_atoms": cfg.atoms,
        "dict_iters": cfg.dict_iters,
        "seed": seed,
        "coding": _coding(cfg),
    }
    values.update(overrides)
    return KsvdConfig.model_validate(values)


def _cloud_config(cfg: ExperimentConfig, seed: int, **overrides: object) -> CloudConfig:
    values: dict[str, object] = {
        "n_atoms": cfg.atoms,
        "dict_iters": cfg.dict_iters,
        "power_iters": cfg.power_iters,
        "consensus_iters": cfg.consensus_iters,
        "seed": seed,
        "coding": _coding(cfg),
    }
    values.update(overrides)
    return CloudConfig.model_validate(values)


def _network(trial: _Trial) -> WeightMatrix:
    topology = gen_erdos_renyi_connected(trial.cfg.sites, trial.cfg.edge_prob, trial.seed)
    W = local_degree_weights(topology)
    save_network(trial.directory / f"network_run{trial.run}", W)
    return W


def _synth_compare(trial: _Trial) -> list[MetricRow]:
    cfg, seed = trial.cfg, trial.seed
    data = gen_synthetic_sites(cfg, seed)
    W = _network(trial)
    ksvd_cfg = _ksvd_config(cfg, seed)
    cloud_cfg = _cloud_config(cfg, seed)

    central, central_trace = run_ksvd(data.pooled, ksvd_cfg)
    _, budget_trace = run_ksvd(data.pooled, matched_ksvd_config(cloud_cfg))
    site_dicts, cloud_trace = cloud_ksvd_run(data.sites, W, cloud_cfg, pool=trial.pool)
    local = run_local_ksvd(data.sites, ksvd_cfg, pool=trial.pool)

    sizes = np.asarray(data.site_sizes, dtype=np.float64)
    local_errors = np.array([trace.errors for _, trace in local])
    pooled_local = (sizes @ local_errors) / float(np.sum(sizes))

    rows = trial.curve("centralized", "", "representation_error", central_trace.errors)
    rows += trial.curve("centralized_budget", "", "representation_error", budget_trace.errors)
    rows += trial.curve("cloud", "", "representation_error", cloud_trace.errors)
    rows += trial.curve("local", "", "representation_error", pooled_local.tolist())
    rows.append(
        trial.row(
            "cloud", "", cfg.dict_iters, "atom_error", avg_atom_error(central, site_dicts)
        )
    )
    rows.append(trial.row("cloud", "", cfg.dict_iters, "messages", cloud_trace.total_messages))

    name = f"cloud_trace_run{trial.run}.csv"
    trial.files[name] = write_cloud_trace_csv(trial.directory / name, cloud_trace)
    return rows


def _psd_parts(n: int, n_sites: int, seed: int) -> list[FloatArray]:
    """Rank-one shared signal plus a small Wishart part per site."""
    rng = stream(seed, STREAM_PARTS)
    u = unit_gaussian(rng, n)
    parts = []
    for _ in range(n_sites):
        G = rng.standard_normal((n, n))
        parts.append(np.outer(u, u) + (DPM_PART_NOISE / n) * (G @ G.T))
    return parts


def _dpm_floor(trial: _Trial) -> list[MetricRow]:
    cfg, seed = trial.cfg, trial.seed
    W = _network(trial)
    parts = _psd_parts(cfg.dim, cfg.sites, seed)
    total = np.sum(np.stack(parts), axis=0)
    u1 = reference_top_eigenpair(total, with_second=False).vector
    q_init = unit_gaussian(stream(seed, STREAM_POWER_INIT), cfg.dim)

    rows = trial.curve(
        "power_method",
        "",
        "eigenvector_error",
        [
            projector_distance(u1, power_method(total, q_init, t_p))
            for t_p in range(1, cfg.power_iters + 1)
        ],
    )
    for t_c in cfg.floor_consensus_grid:
        run = distributed_power_method(
            parts, W, cfg.power_iters, t_c, q_init, record_history=True
        )
        errors = np.array(
            [[projector_distance(u1, Q[i]) for i in range(W.n_sites)] for Q in run.history]
        )
        curve = errors.mean(axis=1).tolist()
        param = f"T_c={t_c}"
        rows += trial.curve("dpm", param, "eigenvector_error", curve)
        rows += trial.curve("dpm", param, "eigenvector_error_max", errors.max(axis=1).tolist())
        floor = error_floor(curve, cfg.floor_tail)
        rows.append(trial.row("dpm", param, cfg.power_iters, "error_floor", floor))
    return rows


def _atom_error(trial: _Trial) -> list[MetricRow]:
    cfg, seed = trial.cfg, trial.seed
    data = gen_synthetic_sites(cfg, seed)
    W = _network(trial)
    central, _ = run_ksvd(data.pooled, _ksvd_config(cfg, seed))

    rows: list[MetricRow] = []
    for t_c in cfg.atom_consensus_grid:
        for t_p in cfg.atom_power_grid:
            cloud_cfg = _cloud_config(cfg, seed, power_iters=t_p, consensus_iters=t_c)
            site_dicts, trace = cloud_ksvd_run(data.sites, W, cloud_cfg, pool=trial.pool)
            param = f"T_p={t_p} T_c={t_c}"
            rows += trial.curve("cloud", param, "representation_error", trace.errors)
            error = avg_atom_error(central, site_dicts)
            rows.append(trial.row("cloud", param, cfg.dict_iters, "atom_error", error))
    return rows


def _online(trial: _Trial) -> list[MetricRow]:
    cfg, seed = trial.cfg, trial.seed
    data = generate_sites(
        n=cfg.dim,
        n_atoms=cfg.atoms,
        n_sites=1,
        samples_per_site=cfg.periods * cfg.batch_size,
        sparsity=cfg.sparsity,
        noise_var=cfg.noise_var,
        seed=seed,
    )
    Y = data.sites[0]
    batches = np.split(Y, cfg.periods, axis=1)
    reference, _ = run_ksvd(Y, _ksvd_config(cfg, seed))
    period_cfg = _ksvd_config(cfg, seed, dict_iters=cfg.period_iters)
    periods = run_online_ksvd(batches, period_cfg, buffer_limit=cfg.buffer_limit)

    rows: list[MetricRow] = []
    for period in periods:
        param = f"period={period.period}"
        errors = period.trace.errors
        end = len(errors)
        rows += trial.curve("online", param, "representation_error", errors)
        rows.append(trial.row("online", param, end, "period_end", errors[-1]))
        rows.append(trial.row("online", param, end, "buffer_size", period.buffer_size))
        plateau = iterations_to_plateau(errors)
        rows.append(trial.row("online", param, end, "iterations_to_plateau", plateau))
        deviation = atom_deviation(reference.atoms, period.dictionary.atoms)
        rows.append(trial.row("online", param, end, "atom_deviation", float(np.mean(deviation))))
    return rows


def _constants(trial: _Trial) -> list[MetricRow]:
    cfg, seed = trial.cfg, trial.seed
    data = gen_synthetic_sites(cfg, seed)
    W = _network(trial)
    lasso = _coding(cfg, "lasso")

    _, central_trace = run_ksvd(
        data.pooled,
        _ksvd_config(cfg, seed, coding=lasso, record_snapshots=True),
        site_sizes=data.site_sizes,
    )
    constants = compute_ksvd_constants(central_trace)
    cloud_cfg = _cloud_config(cfg, seed, coding=lasso, record_parts=True, record_codes=True)
    _, cloud_trace = cloud_ksvd_run(data.sites, W, cloud_cfg, pool=trial.pool)
    params = compute_theorem1_params(cloud_trace, W, constants, delta_d=cfg.delta_d)
    trial.params.append(params)

    rows = trial.curve("lasso_centralized", "", "representation_error", central_trace.errors)
    rows += trial.curve("lasso_cloud", "", "representation_error", cloud_trace.errors)
    agreement = support_agreement(central_trace, cloud_trace)
    rows += trial.curve(
        "lasso_cloud", "", "support_agreement", np.mean(agreement, axis=1).tolist()
    )
    for name in ("c1", "c2_prime", "c2", "c3_prime", "c3", "c4", "tau_min", "eta_tau_max"):
        value = getattr(constants, name)
        rows.append(trial.row("lasso_centralized", "", cfg.dict_iters, name, value))
    for name in ("alpha", "beta", "gamma", "mu", "nu", "zeta", "required_Tp", "consensus_order"):
        value = getattr(params, name)
        rows.append(trial.row("lasso_cloud", "", cfg.dict_iters, name, value))
    return rows


def _mnist(trial: _Trial) -> list[MetricRow]:
    cfg = trial.cfg.model_copy(update={"seed": trial.seed})
    return [
        trial.row(rate.method, f"digit={rate.digit}", rate.split + 1, "detection_rate", rate.rate)
        for rate in run_mnist_pipeline(cfg, pool=trial.pool)
    ]


SCENARIO_RUNNERS: dict[str, Callable[[_Trial], list[MetricRow]]] = {
    "synth-compare": _synth_compare,
    "dpm-floor": _dpm_floor,
    "atom-error": _atom_error,
    "online": _online,
    "constants": _constants,
    "mnist": _mnist,
}


def run_scenario(cfg: ExperimentConfig, *, pool: SitePool | None = None) -> ScenarioResult:
    """Run every trial of ``cfg.scenario`` and write its artifacts under ``cfg.out``.

    Raises:
        CloudKsvdError: Propagated from the algorithms.
        OSError: If the output directory cannot be written; the message
            carries the path.
    """
    pool = pool or SerialSitePool()
    directory = Path(cfg.out)
    directory.mkdir(parents=True, exist_ok=True)
    runner = SCENARIO_RUNNERS[cfg.scenario]
    seeds = [cfg.seed + run for run in range(cfg.trials)]

    files: dict[str, int] = {}
    params: list[AnalysisParams] = []
    rows: list[MetricRow] = []
    for run, seed in enumerate(seeds):
        trial = _Trial(cfg, run, seed, pool, directory, files, params)
        with trial_context(cfg.scenario, run, seed):
            rows += runner(trial)
            logger.info("trial_finished", rows=len(rows))

    files[METRICS_FILE] = write_metrics_csv(directory / METRICS_FILE, rows)
    if params:
        files.update(write_params_report(directory, params))
    manifest = RunManifest(
        scenario=cfg.scenario,
        code_version=__version__,
        seeds=seeds,
        config=cfg.model_dump(mode="json"),
        files=dict(sorted(files.items())),
    )
    write_manifest(directory / MANIFEST_FILE, manifest)
    logger.info("scenario_finished", scenario=cfg.scenario, out=str(directory), rows=len(rows))
    return ScenarioResult(scenario=cfg.scenario, directory=directory, seeds=seeds, files=files)
