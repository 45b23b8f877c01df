"""Pydantic models for algorithm and experiment configuration.

Field constraints encode the documented parameter ranges, so an invalid
configuration fails at construction with a ``ValidationError`` before any
computation starts.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

Scenario = Literal["synth-compare", "dpm-floor", "atom-error", "online", "constants", "mnist"]

SCENARIOS: tuple[Scenario, ...] = (
    "synth-compare",
    "dpm-floor",
    "atom-error",
    "online",
    "constants",
    "mnist",
)


class CodingConfig(BaseModel):
    """Sparse coding parameters shared by centralized, local and cloud K-SVD."""

    model_config = ConfigDict(frozen=True)

    sparsity: int = Field(default=3, ge=1, description="T0, the per-sample support budget")
    method: Literal["omp", "lasso"] = "omp"
    # "sparsity" picks tau per sample by bisection; "fixed" uses lasso_tau as is.
    tau_rule: Literal["sparsity", "fixed"] = "sparsity"
    lasso_tau: float = Field(default=0.0, ge=0.0)
    lasso_tol: float = Field(default=1e-8, gt=0.0)
    lasso_max_sweeps: int = Field(default=10_000, ge=1)
    bisection_steps: int = Field(default=60, ge=1)
    tau_slack: float = Field(default=1.1, ge=1.0)


class KsvdConfig(BaseModel):
    """Centralized (and local) K-SVD run parameters."""

    model_config = ConfigDict(frozen=True)

    n_atoms: int = Field(ge=1, description="K")
    dict_iters: int = Field(ge=1, description="T_d")
    seed: int = Field(ge=0)
    coding: CodingConfig = Field(default_factory=CodingConfig)
    # None solves each atom update to tight tolerance; an integer runs exactly
    # that many power iterations from the shared q_init stream.
    power_iterations: int | None = Field(default=None, ge=1)
    unused_atom_rule: Literal["worst_sample", "shared_stream"] = "worst_sample"
    record_snapshots: bool = False

    @model_validator(mode="after")
    def _sparsity_within_atoms(self) -> KsvdConfig:
        if self.coding.sparsity > self.n_atoms:
            msg = f"sparsity {self.coding.sparsity} exceeds atom count {self.n_atoms}"
            raise ValueError(msg)
        return self


class CloudConfig(BaseModel):
    """Cloud K-SVD run parameters (all sites share them)."""

    model_config = ConfigDict(frozen=True)

    n_atoms: int = Field(ge=1, description="K")
    dict_iters: int = Field(ge=1, description="T_d")
    power_iters: int = Field(ge=1, description="T_p")
    consensus_iters: int = Field(ge=1, description="T_c")
    seed: int = Field(ge=0)
    d_ref: tuple[float, ...] | None = None
    coding: CodingConfig = Field(default_factory=CodingConfig)
    record_parts: bool = False
    record_codes: bool = False
    record_dictionaries: bool = False

    @model_validator(mode="after")
    def _check_consistency(self) -> CloudConfig:
        if self.coding.sparsity > self.n_atoms:
            msg = f"sparsity {self.coding.sparsity} exceeds atom count {self.n_atoms}"
            raise ValueError(msg)
        if self.d_ref is not None:
            norm = math.sqrt(math.fsum(v * v for v in self.d_ref))
            if abs(norm - 1.0) > 1e-8:
                msg = f"d_ref must be unit norm, got {norm}"
                raise ValueError(msg)
        return self


class ExperimentConfig(BaseModel):
    """One harness run: a scenario plus every knob it reads.

    Defaults follow the desk-scale reductions of the published setup; the
    scenario-specific overrides live in ``SCENARIO_DEFAULTS``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    scenario: Scenario
    seed: int = Field(ge=0)
    out: Path = Path("runs")
    trials: int = Field(default=1, ge=1)

    sites: int = Field(default=10, ge=1, description="N")
    samples_per_site: int = Field(default=100, ge=1, description="S_i")
    dim: int = Field(default=20, ge=1, description="n")
    atoms: int = Field(default=50, ge=1, description="K")
    sparsity: int = Field(default=3, ge=1, description="T0")
    dict_iters: int = Field(default=40, ge=1, description="T_d")
    power_iters: int = Field(default=15, ge=1, description="T_p")
    consensus_iters: int = Field(default=15, ge=1, description="T_c")
    edge_prob: float = Field(default=0.5, gt=0.0, le=1.0, description="p")
    noise_var: float = Field(default=0.01, ge=0.0, description="sigma^2")

    # dpm-floor
    floor_consensus_grid: tuple[int, ...] = (3, 4, 5, 10, 15)
    floor_tail: int = Field(default=5, ge=1)
    # atom-error
    atom_power_grid: tuple[int, ...] = (2, 3, 4, 5)
    atom_consensus_grid: tuple[int, ...] = (1, 10)
    # online
    batch_size: int = Field(default=500, ge=1)
    buffer_limit: int = Field(default=1000, ge=1)
    periods: int = Field(default=6, ge=1)
    period_iters: int = Field(default=60, ge=1)
    # constants
    delta_d: float = Field(default=0.01, gt=0.0)
    # mnist
    mnist_images: Path | None = None
    mnist_labels: Path | None = None
    digits: tuple[int, ...] = (0, 3, 5, 8, 9)
    train_per_class: int = Field(default=500, ge=1)
    test_per_class: int = Field(default=100, ge=1)
    splits: int = Field(default=1, ge=1)
    full: bool = False

    @model_validator(mode="after")
    def _check_scenario_fields(self) -> ExperimentConfig:
        if self.sparsity > self.atoms:
            msg = f"sparsity {self.sparsity} exceeds atom count {self.atoms}"
            raise ValueError(msg)
        if self.scenario == "mnist" and (self.mnist_images is None or self.mnist_labels is None):
            msg = "the mnist scenario needs mnist_images and mnist_labels"
            raise ValueError(msg)
        return self


# Applied under the config file and CLI overrides.
SCENARIO_DEFAULTS: dict[str, dict[str, object]] = {
    "synth-compare": {},
    "dpm-floor": {"power_iters": 25},
    "atom-error": {"dict_iters": 10},
    "online": {},
    "constants": {
        "dim": 17,
        "atoms": 40,
        "sites": 4,
        "samples_per_site": 50,
        "dict_iters": 5,
    },
    "mnist": {
        "dim": 256,
        "atoms": 100,
        "sparsity": 10,
        "dict_iters": 20,
        "sites": 10,
    },
}

# Published MNIST scale, enabled by ``full = true``.
MNIST_FULL_SCALE: dict[str, object] = {
    "atoms": 400,
    "train_per_class": 5000,
    "test_per_class": 1000,
    "splits": 5,
}
