"""Dense linear-algebra kernel shared by every other service.

Only the dominant eigenpair (and the second eigenvalue) of symmetric PSD
matrices is ever needed, so the eigensolver is a power iteration with a single
deflation step rather than a full decomposition. All functions are pure and
operate on float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from app.exceptions import InvalidInputError, PowerCollapseError

FloatArray = NDArray[np.float64]

SPECTRAL_NORM_TOL = 1e-12
SPECTRAL_NORM_MAX_ITER = 10_000
EIGEN_TOL = 1e-14
EIGEN_MAX_ITER = 100_000
SYMMETRY_TOL = 1e-10
DEGENERATE_TOL = 1e-12
# Iterates shorter than this are treated as vanished.
COLLAPSE_TOL = 1e-14

_START_SEED = 20_150_917


@dataclass(frozen=True)
class EigenPair:
    """Dominant eigenpair of a symmetric PSD matrix.

    ``second_value`` is filled by one deflation step when requested;
    ``degenerate`` flags ``lambda1 ~ lambda2`` rather than failing, since
    callers decide how to treat a missing spectral gap.
    """

    value: float
    vector: FloatArray
    second_value: float | None = None
    degenerate: bool = False
    iterations: int = 0


def require_finite(a: FloatArray, name: str = "matrix") -> None:
    """Raise ``InvalidInputError`` if *a* holds NaN or Inf."""
    if not np.all(np.isfinite(a)):
        msg = f"{name} contains non-finite entries"
        raise InvalidInputError(msg)


def l2_norm(v: FloatArray) -> float:
    """Euclidean norm of a 1-D vector."""
    return math.sqrt(float(v @ v))


def unit(v: FloatArray) -> FloatArray:
    """Return ``v / ||v||``; the caller guarantees ``v != 0``."""
    return np.asarray(v / l2_norm(v), dtype=np.float64)


def residual_norm_sum(y: FloatArray, d: FloatArray, x: FloatArray) -> float:
    """Sum over columns of ``||y_s - D x_s||_2``."""
    residual = y - d @ x
    return float(np.sum(np.sqrt(np.sum(residual * residual, axis=0))))


def _start_vector(n: int) -> FloatArray:
    return unit(np.random.default_rng(_START_SEED).standard_normal(n))


def spectral_norm(a: FloatArray) -> float:
    """Largest singular value of *a*.

    Power iteration on the smaller of ``A^T A`` / ``A A^T``, stopped when the
    Rayleigh quotient changes by less than 1e-12 (relative) or after 10,000
    iterations.

    Raises:
        InvalidInputError: If *a* contains non-finite values.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    require_finite(a)
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    if not np.any(gram):
        return 0.0

    v = _start_vector(gram.shape[0])
    estimate = 0.0
    for _ in range(SPECTRAL_NORM_MAX_ITER):
        w = gram @ v
        norm_w = l2_norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        rayleigh = float(v @ (gram @ v))
        if abs(rayleigh - estimate) <= SPECTRAL_NORM_TOL * rayleigh:
            estimate = rayleigh
            break
        estimate = rayleigh
    return math.sqrt(max(estimate, 0.0))


def _check_symmetric_psd(m: FloatArray) -> float:
    """Validate *m* and return its entry scale used for relative tolerances."""
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        msg = f"expected a square matrix, got shape {m.shape}"
        raise InvalidInputError(msg)
    require_finite(m)
    scale = max(1.0, float(np.max(np.abs(m))))
    if float(np.max(np.abs(m - m.T))) > SYMMETRY_TOL * scale:
        msg = "matrix is not symmetric"
        raise InvalidInputError(msg)
    if float(np.min(np.diag(m))) < -SYMMETRY_TOL * scale:
        msg = "matrix is not positive semidefinite"
        raise InvalidInputError(msg)
    return scale


def _dominant_vector(
    shifted: FloatArray, tol: float, max_iter: int
) -> tuple[FloatArray, int]:
    v = _start_vector(shifted.shape[0])
    for iteration in range(1, max_iter + 1):
        w = shifted @ v
        w = w / l2_norm(w)
        delta = l2_norm(w - v)
        v = w
        if delta < tol:
            return v, iteration
    return v, max_iter


def _dominant_value(shifted: FloatArray, shift: float, tol: float, max_iter: int) -> float:
    """Largest eigenvalue of ``shifted - shift*I``, converged on the Rayleigh quotient."""
    v = _start_vector(shifted.shape[0])
    previous = math.inf
    rayleigh = 0.0
    for _ in range(max_iter):
        w = shifted @ v
        v = w / l2_norm(w)
        rayleigh = float(v @ (shifted @ v)) - shift
        if abs(rayleigh - previous) <= tol * max(1.0, abs(rayleigh)):
            break
        previous = rayleigh
    return rayleigh


def reference_top_eigenpair(
    m: FloatArray,
    *,
    with_second: bool = True,
    tol: float = EIGEN_TOL,
    max_iter: int = EIGEN_MAX_ITER,
) -> EigenPair:
    """Dominant eigenpair of a symmetric PSD matrix by shifted power iteration.

    The shift equals the PSD tolerance so that tolerated, slightly negative
    eigenvalues can never dominate. With ``with_second`` the second
    eigenvalue is obtained from ``M - lambda1 u u^T``.

    Raises:
        InvalidInputError: If *m* is not square, symmetric, finite and PSD.
    """
    m = np.asarray(m, dtype=np.float64)
    scale = _check_symmetric_psd(m)
    shift = SYMMETRY_TOL * scale
    identity = np.eye(m.shape[0])

    vector, iterations = _dominant_vector(m + shift * identity, tol, max_iter)
    value = float(vector @ (m @ vector))

    second: float | None = None
    degenerate = False
    if with_second:
        if m.shape[0] == 1:
            second = 0.0
        else:
            deflated = m - value * np.outer(vector, vector)
            second = _dominant_value(deflated + shift * identity, shift, tol, max_iter)
        degenerate = abs(value - second) <= DEGENERATE_TOL * max(1.0, abs(value))

    return EigenPair(
        value=value,
        vector=vector,
        second_value=second,
        degenerate=degenerate,
        iterations=iterations,
    )


def power_method(m: FloatArray, q_init: FloatArray, iterations: int) -> FloatArray:
    """Run exactly *iterations* steps of ``q <- Mq / ||Mq||`` from *q_init*.

    Raises:
        PowerCollapseError: If an iterate shrinks below ``COLLAPSE_TOL``.
    """
    q = np.asarray(q_init, dtype=np.float64)
    for step in range(1, iterations + 1):
        v = m @ q
        norm_v = l2_norm(v)
        if norm_v < COLLAPSE_TOL:
            msg = f"power iterate vanished (norm {norm_v:.3e})"
            raise PowerCollapseError(msg, sites=[0], iteration=step)
        q = v / norm_v
    return q


def sign_align(d_ref: FloatArray, q: FloatArray) -> FloatArray:
    """Flip *q* into the half-space of *d_ref*; ``sgn(0)`` counts as ``+1``."""
    return q if float(d_ref @ q) >= 0.0 else -q
