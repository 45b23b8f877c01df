"""Pydantic models for the analysis constants and run manifests written to disk."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

C2Mode = Literal["exhaustive", "realized"]


class KsvdConstants(BaseModel):
    """Constants measured on a centralized lasso K-SVD trace.

    ``c2_mode`` says whether the minimum over supports was exhaustive or
    restricted to the supports the run actually produced.
    """

    model_config = ConfigDict(frozen=True)

    c1: float = Field(description="min tau - |<d_j, residual>| over off-support j")
    c2_prime: float = Field(gt=0.0, description="min squared T0-th singular value")
    c2: float = Field(description="(sqrt(C2') - C1^2 tau_min / 44)^2")
    c3_prime: float = Field(description="max lambda2 / lambda1 over (t, k)")
    c3: float = Field(ge=1.0, description="max{1, 1 / (min lambda1 (1 - C3'))}")
    c4: float = Field(ge=1.0, description="max{1, max ||E_ik||_2}")
    tau_min: float
    eta_tau_max: float = Field(description="max ||x||_1 over lasso codes")
    min_lambda1: float
    c2_mode: C2Mode
    supports_checked: int


class AnalysisParams(BaseModel):
    """Constants plus the stability parameters of a cloud run.

    Each field description is the defining formula; the params report writes
    it next to the value.
    """

    model_config = ConfigDict(frozen=True)

    c1: float = Field(description="min tau - |<d_j, residual>| over off-support j")
    c2_prime: float = Field(gt=0.0, description="min squared T0-th singular value")
    c2: float = Field(description="(sqrt(C2') - C1^2 tau_min / 44)^2")
    c3_prime: float = Field(description="max lambda2 / lambda1 over (t, k)")
    c3: float = Field(ge=1.0, description="max{1, 1 / (min lambda1 (1 - C3'))}")
    c4: float = Field(ge=1.0, description="max{1, max ||E_ik||_2}")
    alpha: float = Field(description="max_(t,k) sum_i ||M_i||_2")
    beta: float = Field(description="max 1 / ||M q_c|| over centralized power iterates")
    gamma: float = Field(description="max_(t,k) sqrt(sum_i ||M_i||_F^2)")
    mu: float = Field(ge=1.0, description="max{1, max tan(theta)}")
    nu: float = Field(ge=0.0, lt=1.0, description="max lambda2 / lambda1 of sum_i M_i")
    zeta: float = Field(description="K sqrt(2 S_max) (6 sqrt(K T0) / (tau_min C2) + eta_max)")
    epsilon: float = Field(gt=0.0, description="free parameter of the power-method bound")
    epsilon_param: float = Field(description="mu nu^T_p + 4 epsilon^(3 T_p)")
    delta_d: float = Field(
        gt=0.0, description="target atom error, below min{1/sqrt(2), C1^2 tau_min / (44 sqrt(2K))}"
    )
    delta_d_clamped: bool = Field(description="delta_d was replaced by half its bound")
    tau_min: float = Field(description="min lasso tau over samples and iterations")
    eta_tau_max: float = Field(description="max ||x||_1 over lasso codes")
    T_mix: int = Field(ge=1, description="min t with max_i ||e_i^T W^t - 1^T / N||_2 <= 1/2")
    power_iters: int = Field(ge=1, description="T_p of the recorded run")
    required_Tp: int = Field(
        ge=1,
        description=(
            "ceil([2 (T_d K - 2) log(8 C3 C4^2 N + 5) + (T_d - 1) log(1 + zeta)"
            " + log(8 C3 C4 mu N sqrt(n) / delta_d)] / -log(nu + 4 epsilon^3))"
        ),
    )
    consensus_order: float = Field(
        description="T_p T_mix log(2 alpha beta / epsilon) + T_mix log(gamma sqrt(N) / alpha)"
    )
    c2_mode: C2Mode = Field(description="exhaustive or realized support search for C2'")


class RunManifest(BaseModel):
    """Everything needed to reproduce a harness run; deliberately free of timestamps."""

    model_config = ConfigDict(frozen=True)

    scenario: str
    code_version: str
    seeds: list[int]
    config: dict[str, object]
    files: dict[str, int] = Field(description="file name -> data row count")
