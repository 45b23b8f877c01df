"""Analysis quantities computed from recorded K-SVD and cloud K-SVD traces.

Nothing here changes a run; every function is post-processing over traces,
dictionaries or matrices.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import structlog

from app.exceptions import (
    GapViolationError,
    InsufficientTraceError,
    InvalidConfigError,
    InvalidInputError,
)
from app.schemas.reports import AnalysisParams, C2Mode, KsvdConstants
from app.services.cloud_ksvd import CloudTrace
from app.services.dictionary_learning import Dictionary, LearnTrace
from app.services.linalg import (
    COLLAPSE_TOL,
    FloatArray,
    l2_norm,
    reference_top_eigenpair,
    residual_norm_sum,
    spectral_norm,
)
from app.services.network import WeightMatrix, estimate_mixing_time

logger = structlog.get_logger()

UNIT_TOL = 1e-8
EXHAUSTIVE_LIMIT = 100_000
DEFAULT_DELTA_D = 0.01

# Values reported for the n=17, K=40, T0=3 lasso setup, logged for comparison only.
PUBLISHED_CONSTANTS = {"c1": 0.0586, "c2": 0.1633, "c3": 4.544, "c4": 1.5947}
PUBLISHED_STABILITY = {"mu": 9000.0, "nu": 0.3242, "required_Tp": 16_000.0}


def representation_error(Y: FloatArray, D: FloatArray | Dictionary, X: FloatArray) -> float:
    """``(1 / nS) sum_s ||y_s - D x_s||_2`` over all samples."""
    atoms = D.atoms if isinstance(D, Dictionary) else np.asarray(D, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    return residual_norm_sum(Y, atoms, X) / (Y.shape[0] * Y.shape[1])


def _require_unit(v: FloatArray, name: str) -> FloatArray:
    v = np.asarray(v, dtype=np.float64)
    if abs(l2_norm(v) - 1.0) > UNIT_TOL:
        msg = f"{name} is not a unit vector (norm {l2_norm(v):.12f})"
        raise InvalidInputError(msg)
    return v


def projector_distance(u: FloatArray, v: FloatArray) -> float:
    """``||u u^T - v v^T||_2`` for unit vectors, i.e. the sine of their angle.

    Raises:
        InvalidInputError: If either vector is off unit norm by more than 1e-8.
    """
    u = _require_unit(u, "u")
    v = _require_unit(v, "v")
    return spectral_norm(np.outer(u, u) - np.outer(v, v))


def avg_atom_error(central: FloatArray | Dictionary, site_dicts: Sequence[FloatArray]) -> float:
    """Mean projector distance between centralized atoms and every site's atoms."""
    D = central.atoms if isinstance(central, Dictionary) else np.asarray(central)
    if not site_dicts:
        msg = "need at least one site dictionary"
        raise InvalidInputError(msg)
    total = 0.0
    for site in site_dicts:
        atoms = site.atoms if isinstance(site, Dictionary) else np.asarray(site)
        if atoms.shape != D.shape:
            msg = f"site dictionary shape {atoms.shape} does not match {D.shape}"
            raise InvalidInputError(msg)
        total += sum(projector_distance(D[:, k], atoms[:, k]) for k in range(D.shape[1]))
    return total / (len(site_dicts) * D.shape[1])


def atom_deviation(reference: FloatArray, atoms: FloatArray) -> FloatArray:
    """Per-atom projector distance between two dictionaries of the same shape."""
    return np.array(
        [projector_distance(reference[:, k], atoms[:, k]) for k in range(reference.shape[1])]
    )


def site_spread(estimates: FloatArray) -> FloatArray:
    """Projector distance of each site's atom estimate (rows) from their mean direction.

    Raises:
        InvalidInputError: If the estimates cancel out and have no mean direction.
    """
    rows = np.asarray(estimates, dtype=np.float64)
    mean = rows.mean(axis=0)
    norm = l2_norm(mean)
    if norm < COLLAPSE_TOL:
        msg = "site estimates cancel out and have no mean direction"
        raise InvalidInputError(msg)
    center = mean / norm
    return np.array([projector_distance(center, row) for row in rows])


def min_singular_squared(
    D: FloatArray,
    sparsity: int,
    supports: Sequence[tuple[int, ...]] | None = None,
    *,
    exhaustive_limit: int = EXHAUSTIVE_LIMIT,
) -> tuple[float, C2Mode, int]:
    """Smallest ``sigma_T0(D_I)^2`` over supports ``I`` of size *sparsity*.

    Enumerates every support when there are at most *exhaustive_limit* of
    them; otherwise uses *supports* (realized supports padded to size T0 by the
    caller). Returns the value, the mode and the number of supports checked.
    """
    n_atoms = D.shape[1]
    mode: C2Mode
    if math.comb(n_atoms, sparsity) <= exhaustive_limit:
        index = np.array(list(combinations(range(n_atoms), sparsity)), dtype=np.intp)
        mode = "exhaustive"
    else:
        if not supports:
            msg = "too many supports to enumerate and none were realized"
            raise InsufficientTraceError(msg)
        index = np.array(sorted(set(supports)), dtype=np.intp)
        mode = "realized"
    gram = D.T @ D
    blocks = gram[index[:, :, None], index[:, None, :]]
    # T0 x T0 symmetric blocks; the smallest eigenvalue is sigma_T0 squared
    smallest = np.linalg.eigvalsh(blocks)[:, 0]
    return float(np.min(smallest)), mode, int(index.shape[0])


def p3_constants(spectra: FloatArray) -> tuple[float, float, float]:
    """``(C3', C3, min lambda1)`` from rows of ``(lambda1, lambda2)``; NaN rows are skipped."""
    spectra = np.asarray(spectra, dtype=np.float64).reshape(-1, 2)
    spectra = spectra[~np.isnan(spectra[:, 0])]
    if spectra.size == 0:
        msg = "no eigenvalue records"
        raise InsufficientTraceError(msg)
    lambda1 = spectra[:, 0]
    ratios = spectra[:, 1] / lambda1
    c3_prime = float(np.max(ratios))
    min_lambda1 = float(np.min(lambda1))
    gap = min_lambda1 * (1.0 - c3_prime)
    c3 = max(1.0, 1.0 / gap) if gap > 0 else math.inf
    return c3_prime, c3, min_lambda1


def _padded_support(column: FloatArray, sparsity: int) -> tuple[int, ...] | None:
    support = np.flatnonzero(column).tolist()
    if len(support) > sparsity:
        return None
    filler = (j for j in range(column.shape[0]) if j not in support)
    while len(support) < sparsity:
        support.append(next(filler))
    return tuple(sorted(support))


def compute_ksvd_constants(
    trace: LearnTrace, *, exhaustive_limit: int = EXHAUSTIVE_LIMIT
) -> KsvdConstants:
    """Measure C1 through C4 on a lasso K-SVD trace recorded with snapshots.

    Raises:
        InsufficientTraceError: If snapshots, taus or off-support coordinates
            are missing.
    """
    if not trace.has_snapshots or trace.data is None:
        msg = "constants need a trace recorded with record_snapshots"
        raise InsufficientTraceError(msg)
    if trace.config.coding.method != "lasso":
        msg = "constants are defined on lasso codes"
        raise InsufficientTraceError(msg)

    Y = trace.data
    sparsity = trace.config.coding.sparsity
    margins: list[float] = []
    taus: list[FloatArray] = []
    eta = 0.0
    c2_prime = math.inf
    c2_mode: C2Mode = "exhaustive"
    checked = 0
    spectra: list[FloatArray] = []
    c4 = 1.0

    for record in trace.records:
        D, X, tau = record.coding_dictionary, record.codes, record.taus
        if D is None or X is None or tau is None or record.spectra is None:
            msg = f"iteration {record.iteration} lacks snapshots"
            raise InsufficientTraceError(msg)
        correlations = np.abs(D.T @ (Y - D @ X))
        off_support = X == 0.0
        if np.any(off_support):
            margins.append(float(np.min((tau[None, :] - correlations)[off_support])))
        taus.append(tau)
        eta = max(eta, float(np.max(np.sum(np.abs(X), axis=0))))

        padded = (_padded_support(X[:, s], sparsity) for s in range(X.shape[1]))
        realized = [support for support in padded if support is not None]
        value, mode, count = min_singular_squared(
            D, sparsity, realized, exhaustive_limit=exhaustive_limit
        )
        c2_prime = min(c2_prime, value)
        c2_mode = mode
        checked += count
        spectra.append(record.spectra)
        if record.block_norms is not None:
            c4 = max(c4, float(np.max(record.block_norms)))

    if not margins:
        msg = "every coordinate is on-support; C1 is undefined"
        raise InsufficientTraceError(msg)
    c1 = min(margins)
    tau_min = float(np.min(np.concatenate(taus)))
    c3_prime, c3, min_lambda1 = p3_constants(np.concatenate(spectra))
    c2 = (math.sqrt(max(c2_prime, 0.0)) - c1**2 * tau_min / 44.0) ** 2

    constants = KsvdConstants(
        c1=c1,
        c2_prime=c2_prime,
        c2=c2,
        c3_prime=c3_prime,
        c3=c3,
        c4=c4,
        tau_min=tau_min,
        eta_tau_max=eta,
        min_lambda1=min_lambda1,
        c2_mode=c2_mode,
        supports_checked=checked,
    )
    logger.info(
        "ksvd_constants",
        c1=c1,
        c2=c2,
        c3=c3,
        c4=c4,
        c2_mode=c2_mode,
        published=PUBLISHED_CONSTANTS,
    )
    return constants


@dataclass(frozen=True)
class PowerMethodParams:
    """Stability inputs of one distributed power method instance.

    ``eigen_bound`` is ``tan(theta) (lambda2 / lambda1)^T_p``, the error a
    centralized power method would still carry after ``T_p`` steps.
    """

    alpha: float
    beta: float
    gamma: float
    lambda1: float
    lambda2: float
    nu: float
    tan_theta: float
    eigen_bound: float
    dominant: FloatArray


def power_method_params(
    M_parts: Sequence[FloatArray], q_init: FloatArray, power_iters: int
) -> PowerMethodParams:
    """Alpha, beta, gamma, the eigen-gap ratio and tan(theta) for one atom update.

    Beta replays the centralized power method on ``sum_i M_i`` from *q_init*.
    """
    alpha = sum(spectral_norm(M) for M in M_parts)
    gamma = math.sqrt(sum(float(np.sum(M * M)) for M in M_parts))
    total = np.sum(np.stack(M_parts), axis=0)
    pair = reference_top_eigenpair(total)
    lambda1 = pair.value
    lambda2 = float(pair.second_value or 0.0)
    nu = lambda2 / lambda1 if lambda1 > 0 else math.inf

    cosine = abs(float(pair.vector @ q_init))
    tan_theta = math.sqrt(max(0.0, 1.0 - cosine**2)) / cosine if cosine > 0 else math.inf

    beta = 0.0
    q = np.asarray(q_init, dtype=np.float64)
    for _ in range(power_iters):
        v = total @ q
        q = v / l2_norm(v)
        beta = max(beta, 1.0 / l2_norm(total @ q))

    return PowerMethodParams(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        lambda1=lambda1,
        lambda2=lambda2,
        nu=nu,
        tan_theta=tan_theta,
        eigen_bound=tan_theta * abs(nu) ** power_iters,
        dominant=pair.vector,
    )


def compute_theorem1_params(
    ctrace: CloudTrace,
    W: WeightMatrix,
    constants: KsvdConstants,
    *,
    delta_d: float = DEFAULT_DELTA_D,
    epsilon: float | None = None,
) -> AnalysisParams:
    """Fill the stability parameters of a cloud run and the required ``T_p``.

    *delta_d* is clamped to half of its admissible bound when it exceeds it;
    *epsilon* defaults to half of its admissible upper bound.

    Raises:
        InsufficientTraceError: If the trace was recorded without ``record_parts``.
        GapViolationError: If some (t, k) shows no spectral gap.
        InvalidConfigError: If *epsilon* lies outside its admissible range.
    """
    cfg = ctrace.config
    records = [r for r in ctrace.atoms if not r.reinitialized]
    if not records or any(r.parts is None for r in records):
        msg = "stability parameters need a cloud trace recorded with record_parts"
        raise InsufficientTraceError(msg)

    per_atom = [
        (r.iteration, r.atom, power_method_params(r.parts, r.q_init, cfg.power_iters))
        for r in records
        if r.parts is not None
    ]

    offending = [(t, k) for t, k, p in per_atom if not p.nu < 1.0]
    if offending:
        msg = f"no spectral gap at {len(offending)} atom updates"
        raise GapViolationError(msg, offending=offending)

    alpha = max(p.alpha for _, _, p in per_atom)
    beta = max(p.beta for _, _, p in per_atom)
    gamma = max(p.gamma for _, _, p in per_atom)
    nu = max(p.nu for _, _, p in per_atom)
    mu = max(1.0, max(p.tan_theta for _, _, p in per_atom))

    T_p = cfg.power_iters
    eps_bound = min(
        (10.0 * alpha**2 * beta**2) ** (-1.0 / (3 * T_p)), ((1.0 - nu) / 4.0) ** (1 / 3)
    )
    if epsilon is None:
        epsilon = 0.5 * eps_bound
    elif not 0.0 < epsilon < eps_bound:
        msg = f"epsilon must lie in (0, {eps_bound}), got {epsilon}"
        raise InvalidConfigError(msg)

    K = cfg.n_atoms
    N = ctrace.n_sites
    n = ctrace.d_ref.shape[0]
    s_max = max(ctrace.site_sizes)
    c1, c2, c3, c4 = constants.c1, constants.c2, constants.c3, constants.c4
    tau_min = constants.tau_min

    delta_bound = min(1.0 / math.sqrt(2.0), c1**2 * tau_min / (44.0 * math.sqrt(2.0 * K)))
    clamped = delta_d >= delta_bound
    if clamped:
        logger.warning("delta_d_clamped", requested=delta_d, bound=delta_bound)
        delta_d = 0.5 * delta_bound

    zeta = (
        K
        * math.sqrt(2.0 * s_max)
        * (6.0 * math.sqrt(K * cfg.coding.sparsity) / (tau_min * c2) + constants.eta_tau_max)
    )
    growth = 8.0 * c3 * c4**2 * N + 5.0
    numerator = (
        2.0 * (cfg.dict_iters * K - 2) * math.log(growth)
        + (cfg.dict_iters - 1) * math.log1p(zeta)
        + math.log(8.0 * c3 * c4 * mu * N * math.sqrt(n) / delta_d)
    )
    denominator = -math.log(nu + 4.0 * epsilon**3)
    required = max(1, math.ceil(numerator / denominator))

    T_mix = estimate_mixing_time(W)
    consensus_order = T_p * T_mix * math.log(2.0 * alpha * beta / epsilon) + T_mix * math.log(
        gamma * math.sqrt(N) / alpha
    )

    params = AnalysisParams(
        c1=c1,
        c2_prime=constants.c2_prime,
        c2=c2,
        c3_prime=constants.c3_prime,
        c3=c3,
        c4=c4,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        mu=mu,
        nu=nu,
        zeta=zeta,
        epsilon=epsilon,
        epsilon_param=mu * nu**T_p + 4.0 * epsilon ** (3 * T_p),
        delta_d=delta_d,
        delta_d_clamped=clamped,
        tau_min=tau_min,
        eta_tau_max=constants.eta_tau_max,
        T_mix=T_mix,
        power_iters=T_p,
        required_Tp=required,
        consensus_order=consensus_order,
        c2_mode=constants.c2_mode,
    )
    logger.info(
        "stability_params",
        mu=mu,
        nu=nu,
        required_Tp=required,
        published=PUBLISHED_STABILITY,
    )
    return params


def support_agreement(central: LearnTrace, cloud: CloudTrace) -> FloatArray:
    """Fraction of sites whose coding supports match the centralized ones, per (t, k).

    The centralized run must have been fed the sites' data concatenated in
    site order.

    Raises:
        InsufficientTraceError: If either trace lacks its coding-stage codes.
    """
    pairs = [
        (record.codes, it.codes)
        for record, it in zip(central.records, cloud.iterations, strict=False)
        if record.codes is not None and it.codes is not None
    ]
    if not pairs or len(pairs) < min(len(central.records), len(cloud.iterations)):
        msg = "support agreement needs centralized snapshots and cloud record_codes"
        raise InsufficientTraceError(msg)
    bounds = np.cumsum((0, *cloud.site_sizes))
    agreement = np.zeros((len(pairs), cloud.config.n_atoms))
    for t, (X_central, site_codes) in enumerate(pairs):
        for i, X_site in enumerate(site_codes):
            block = X_central[:, bounds[i] : bounds[i + 1]]
            agreement[t] += np.all((block != 0.0) == (X_site != 0.0), axis=1)
    return agreement / cloud.n_sites


def error_floor(curve: Sequence[float], tail: int = 5) -> float:
    """Median of the last *tail* values of an error curve."""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        msg = "empty curve"
        raise InvalidInputError(msg)
    return float(np.median(values[-tail:]))


def iterations_to_plateau(curve: Sequence[float], rel_tol: float = 0.05) -> int:
    """First 1-based index from which every value stays within *rel_tol* of the final value."""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        msg = "empty curve"
        raise InvalidInputError(msg)
    final = values[-1]
    band = rel_tol * abs(final)
    outside = np.flatnonzero(np.abs(values - final) > band)
    return 1 if outside.size == 0 else int(outside[-1]) + 2
