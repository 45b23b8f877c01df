"""Sparse coding: orthogonal matching pursuit and coordinate-descent lasso.

OMP drives every experiment. The lasso path exists for the diagnostics,
whose constants are defined on lasso codes: ``encode_batch`` with
``method="lasso"`` picks a per-sample tau by bisection so that the support
stays within the sparsity budget and records the tau it used.

Batch coding reuses one ``D^T D`` Gram matrix; codes are returned as dense
``K x S`` arrays, one column per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import structlog
from numpy.typing import NDArray

from app.exceptions import ConvergenceError, InvalidConfigError, InvalidDictionaryError
from app.schemas.config import CodingConfig
from app.services.linalg import FloatArray, l2_norm, require_finite

logger = structlog.get_logger()

OMP_RIDGE = 1e-12
OMP_RESIDUAL_TOL = 1e-12
ZERO_ATOM_TOL = 1e-12


@dataclass(frozen=True)
class SparseCode:
    """One sample's code: strictly increasing support with nonzero values."""

    support: NDArray[np.intp]
    values: FloatArray
    n_atoms: int

    @property
    def nnz(self) -> int:
        return int(self.support.size)

    def dense(self) -> FloatArray:
        x = np.zeros(self.n_atoms)
        x[self.support] = self.values
        return x

    @classmethod
    def from_dense(cls, x: FloatArray) -> SparseCode:
        support = np.flatnonzero(x)
        return cls(support=support, values=x[support].copy(), n_atoms=x.shape[0])


@dataclass
class CodingResult:
    """Codes for a batch of samples plus the per-sample lasso taus (lasso only)."""

    codes: FloatArray
    taus: FloatArray | None = None
    failures: list[int] = field(default_factory=list)


def check_dictionary(D: FloatArray, sparsity: int | None = None) -> FloatArray:
    """Validate a dictionary matrix for coding.

    Raises:
        InvalidDictionaryError: If *D* is not 2-D, non-finite or has a zero atom.
        InvalidConfigError: If *sparsity* exceeds the atom count.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        msg = f"dictionary must be 2-D, got shape {D.shape}"
        raise InvalidDictionaryError(msg)
    if not np.all(np.isfinite(D)):
        msg = "dictionary contains non-finite entries"
        raise InvalidDictionaryError(msg)
    norms = np.sqrt(np.sum(D * D, axis=0))
    zero_atoms = np.flatnonzero(norms < ZERO_ATOM_TOL)
    if zero_atoms.size:
        msg = f"dictionary has zero atoms at columns {zero_atoms.tolist()}"
        raise InvalidDictionaryError(msg)
    if sparsity is not None and sparsity > D.shape[1]:
        msg = f"sparsity {sparsity} exceeds atom count {D.shape[1]}"
        raise InvalidConfigError(msg)
    return D


def _check_sample(y: FloatArray, D: FloatArray) -> FloatArray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != D.shape[0]:
        msg = f"sample shape {y.shape} does not match dictionary rows {D.shape[0]}"
        raise InvalidDictionaryError(msg)
    require_finite(y, "sample")
    return y


def _omp(
    y: FloatArray,
    D: FloatArray,
    gram: FloatArray,
    sparsity: int,
    path: list[float] | None = None,
) -> FloatArray:
    """Greedy OMP against a precomputed Gram; returns the dense code."""
    x = np.zeros(D.shape[1])
    support: list[int] = []
    coef = np.zeros(0)
    residual = y.copy()
    if path is not None:
        path.append(l2_norm(residual))

    for _ in range(sparsity):
        if l2_norm(residual) < OMP_RESIDUAL_TOL:
            break
        correlations = np.abs(D.T @ residual)
        correlations[support] = -1.0
        # argmax returns the first maximum, i.e. the lowest index on ties
        support.append(int(np.argmax(correlations)))
        idx = np.asarray(support)
        normal = gram[np.ix_(idx, idx)] + OMP_RIDGE * np.eye(idx.size)
        coef = np.linalg.solve(normal, D[:, idx].T @ y)
        residual = y - D[:, idx] @ coef
        if path is not None:
            path.append(l2_norm(residual))

    if support:
        x[np.asarray(support)] = coef
    return x


def omp_encode(y: FloatArray, D: FloatArray, sparsity: int) -> SparseCode:
    """Code *y* with at most *sparsity* atoms by orthogonal matching pursuit.

    Each step picks the atom most correlated with the residual (lowest index
    on ties) and re-solves least squares on the selected support through the
    ridge-regularized normal equations.

    Raises:
        InvalidDictionaryError: On a zero atom or a shape mismatch.
        InvalidConfigError: If *sparsity* exceeds the atom count.
    """
    D = check_dictionary(D, sparsity)
    y = _check_sample(y, D)
    return SparseCode.from_dense(_omp(y, D, D.T @ D, sparsity))


def omp_residual_path(y: FloatArray, D: FloatArray, sparsity: int) -> list[float]:
    """Residual norms before the first and after every OMP selection."""
    D = check_dictionary(D, sparsity)
    y = _check_sample(y, D)
    path: list[float] = []
    _omp(y, D, D.T @ D, sparsity, path)
    return path


def _soft_threshold(value: float, tau: float) -> float:
    if value > tau:
        return value - tau
    if value < -tau:
        return value + tau
    return 0.0


def _lasso_cd(
    dty: FloatArray,
    gram: FloatArray,
    tau: float,
    tol: float,
    max_sweeps: int,
    x0: FloatArray | None = None,
) -> tuple[FloatArray, int]:
    """Cyclic coordinate descent on ``0.5||y - Dx||^2 + tau ||x||_1``.

    Works entirely in Gram form: ``dty = D^T y`` and ``gram = D^T D``.

    Raises:
        ConvergenceError: After *max_sweeps* sweeps, carrying the last iterate.
    """
    n_atoms = dty.shape[0]
    x = np.zeros(n_atoms) if x0 is None else np.array(x0, dtype=np.float64)
    diag = np.diag(gram)
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(n_atoms):
            old = x[j]
            rho = dty[j] - float(gram[j] @ x) + diag[j] * old
            new = _soft_threshold(rho, tau) / diag[j]
            if new != old:
                x[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            return x, sweep
    msg = f"lasso did not converge in {max_sweeps} sweeps (tau={tau:.3e})"
    raise ConvergenceError(msg, last_iterate=x.copy())


def lasso_objective(y: FloatArray, D: FloatArray, x: FloatArray, tau: float) -> float:
    """``0.5 ||y - Dx||_2^2 + tau ||x||_1``."""
    residual = y - D @ x
    return 0.5 * float(residual @ residual) + tau * float(np.sum(np.abs(x)))


def lasso_encode(
    y: FloatArray,
    D: FloatArray,
    tau: float,
    cfg: CodingConfig | None = None,
) -> SparseCode:
    """Solve the lasso for one sample by cyclic coordinate descent.

    Converged when the largest coordinate change in a sweep drops below
    ``cfg.lasso_tol``.

    Raises:
        InvalidConfigError: If *tau* is negative.
        ConvergenceError: If ``cfg.lasso_max_sweeps`` is exhausted; the
            error carries the last iterate as a dense vector.
    """
    cfg = cfg or CodingConfig()
    if tau < 0:
        msg = f"tau must be non-negative, got {tau}"
        raise InvalidConfigError(msg)
    D = check_dictionary(D)
    y = _check_sample(y, D)
    x, _ = _lasso_cd(D.T @ y, D.T @ D, tau, cfg.lasso_tol, cfg.lasso_max_sweeps)
    return SparseCode.from_dense(x)


def _lasso_or_last(
    dty: FloatArray, gram: FloatArray, tau: float, cfg: CodingConfig
) -> tuple[FloatArray, bool]:
    try:
        x, _ = _lasso_cd(dty, gram, tau, cfg.lasso_tol, cfg.lasso_max_sweeps)
    except ConvergenceError as exc:
        return np.asarray(exc.last_iterate), False
    return x, True


def _select_tau(dty: FloatArray, gram: FloatArray, sparsity: int, cfg: CodingConfig) -> float:
    high = float(np.max(np.abs(dty)))
    if high == 0.0:
        return 0.0
    low = 0.0
    best = high
    for _ in range(cfg.bisection_steps):
        mid = 0.5 * (low + high)
        x, _ = _lasso_or_last(dty, gram, mid, cfg)
        if np.count_nonzero(x) <= sparsity:
            best = mid
            high = mid
        else:
            low = mid
    return best


def select_tau_for_sparsity(
    y: FloatArray,
    D: FloatArray,
    sparsity: int,
    cfg: CodingConfig | None = None,
) -> float:
    """Smallest probed tau whose lasso solution has at most *sparsity* nonzeros.

    Bisects ``[0, ||D^T y||_inf]``; the upper end is always admissible since
    it forces the zero solution.
    """
    cfg = cfg or CodingConfig()
    if sparsity < 1:
        msg = f"sparsity must be at least 1, got {sparsity}"
        raise InvalidConfigError(msg)
    D = check_dictionary(D)
    y = _check_sample(y, D)
    return _select_tau(D.T @ y, D.T @ D, sparsity, cfg)


def _lasso_sample(
    y: FloatArray, D: FloatArray, gram: FloatArray, cfg: CodingConfig
) -> tuple[FloatArray, float, bool]:
    dty = D.T @ y
    if cfg.tau_rule == "fixed":
        x, converged = _lasso_or_last(dty, gram, cfg.lasso_tau, cfg)
        return x, cfg.lasso_tau, converged

    selected = _select_tau(dty, gram, cfg.sparsity, cfg)
    if cfg.tau_slack > 1.0 and selected > 0.0:
        relaxed = cfg.tau_slack * selected
        x, converged = _lasso_or_last(dty, gram, relaxed, cfg)
        if converged and np.count_nonzero(x) <= cfg.sparsity:
            return x, relaxed, True
    x, converged = _lasso_or_last(dty, gram, selected, cfg)
    return x, selected, converged


def encode_batch(Y: FloatArray, D: FloatArray, cfg: CodingConfig) -> CodingResult:
    """Code every column of *Y* against *D* with the configured method.

    With ``method="lasso"`` and ``tau_rule="sparsity"`` the tau of each
    sample is ``tau_slack`` times the bisection tau whenever that keeps the
    support within budget, and the bisection tau otherwise. Samples whose
    lasso hit the sweep cap keep their last iterate and are listed in
    ``failures``.

    Raises:
        InvalidDictionaryError: On a zero atom or a shape mismatch.
        InvalidConfigError: If the sparsity exceeds the atom count.
    """
    D = check_dictionary(D, cfg.sparsity)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != D.shape[0]:
        msg = f"data shape {Y.shape} does not match dictionary rows {D.shape[0]}"
        raise InvalidDictionaryError(msg)
    require_finite(Y, "data")

    gram = D.T @ D
    n_samples = Y.shape[1]
    codes = np.zeros((D.shape[1], n_samples))

    if cfg.method == "omp":
        for s in range(n_samples):
            codes[:, s] = _omp(Y[:, s], D, gram, cfg.sparsity)
        return CodingResult(codes=codes)

    taus = np.zeros(n_samples)
    failures: list[int] = []
    for s in range(n_samples):
        codes[:, s], taus[s], converged = _lasso_sample(Y[:, s], D, gram, cfg)
        if not converged:
            failures.append(s)
    if failures:
        logger.warning("lasso_sweep_cap_reached", samples=len(failures))
    return CodingResult(codes=codes, taus=taus, failures=failures)
