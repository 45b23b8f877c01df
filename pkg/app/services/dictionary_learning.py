"""Centralized, local and online K-SVD.

Each iteration codes every sample against the current dictionary, then
sweeps the atoms in order: atom ``k`` is replaced by the dominant left
singular vector of its restricted error matrix and its coefficient row by the
matching right factor. Atoms are sign-aligned with a shared reference vector
so centralized and cloud dictionaries compare atom by atom.

Two atom-update modes exist:

* tight (``power_iterations=None``): the reference eigensolver, run to
  1e-14; atoms nobody uses are replaced with the worst-represented sample.
* budget (``power_iterations=T_p``): exactly ``T_p`` power iterations from a
  fresh ``q_init`` per (t, k) drawn from the shared stream, and unused atoms
  redrawn from the shared re-init stream. This is what a one-site cloud run
  computes, operation for operation.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import structlog
from numpy.typing import NDArray

from app.exceptions import (
    EmptyEnergyError,
    InvalidConfigError,
    InvalidDictionaryError,
    PowerCollapseError,
)
from app.schemas.config import KsvdConfig
from app.services.linalg import (
    EigenPair,
    FloatArray,
    power_method,
    reference_top_eigenpair,
    residual_norm_sum,
    sign_align,
    spectral_norm,
    unit,
)
from app.services.seeding import SeedStreams, reference_vector, unit_gaussian
from app.services.site_pool import SerialSitePool, SitePool
from app.services.sparse_coding import encode_batch

logger = structlog.get_logger()

UNIT_NORM_TOL = 1e-10
EMPTY_ENERGY_TOL = 1e-12
WORST_SAMPLE_TOL = 1e-12


@dataclass(frozen=True)
class Dictionary:
    """An ``n x K`` matrix whose columns (atoms) have unit l2 norm."""

    atoms: FloatArray

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            msg = f"dictionary must be 2-D, got shape {atoms.shape}"
            raise InvalidDictionaryError(msg)
        if not np.all(np.isfinite(atoms)):
            msg = "dictionary contains non-finite entries"
            raise InvalidDictionaryError(msg)
        norms = np.sqrt(np.sum(atoms * atoms, axis=0))
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad.size:
            msg = f"atoms {bad.tolist()} are not unit norm"
            raise InvalidDictionaryError(msg)
        object.__setattr__(self, "atoms", atoms)

    @property
    def n(self) -> int:
        return int(self.atoms.shape[0])

    @property
    def n_atoms(self) -> int:
        return int(self.atoms.shape[1])

    @classmethod
    def from_columns(cls, columns: FloatArray) -> Dictionary:
        """Normalize each column of *columns* and wrap the result."""
        columns = np.asarray(columns, dtype=np.float64)
        norms = np.sqrt(np.sum(columns * columns, axis=0))
        if np.any(norms < EMPTY_ENERGY_TOL):
            msg = "cannot normalize a zero column"
            raise InvalidDictionaryError(msg)
        return cls(columns / norms)


@dataclass
class IterationRecord:
    """What one K-SVD iteration produced.

    The optional fields are filled only with ``record_snapshots``:
    ``coding_dictionary`` is ``D^(t-1)``, ``codes`` the coding-stage output,
    ``spectra`` holds ``(lambda1, lambda2)`` of each ``E_kR E_kR^T`` (NaN for
    re-initialised atoms) and ``block_norms[k, i]`` is ``||E_{i,k}||_2`` for
    site ``i``'s columns of the unrestricted error matrix.
    """

    iteration: int
    error: float
    usage: NDArray[np.intp]
    reinitialized: list[int] = field(default_factory=list)
    dictionary: FloatArray | None = None
    coding_dictionary: FloatArray | None = None
    codes: FloatArray | None = None
    taus: FloatArray | None = None
    spectra: FloatArray | None = None
    block_norms: FloatArray | None = None


@dataclass
class LearnTrace:
    """Per-iteration records of a K-SVD run, plus the data when snapshots are kept."""

    config: KsvdConfig
    site_sizes: tuple[int, ...]
    records: list[IterationRecord] = field(default_factory=list)
    data: FloatArray | None = None

    @property
    def errors(self) -> list[float]:
        return [record.error for record in self.records]

    @property
    def has_snapshots(self) -> bool:
        return self.data is not None and all(
            record.codes is not None and record.spectra is not None for record in self.records
        )


@dataclass
class AtomUpdate:
    d: FloatArray
    x_row: FloatArray
    eigen: EigenPair | None = None


def init_dictionary(n: int, n_atoms: int, seed: int) -> Dictionary:
    """Random dictionary with i.i.d. standard normal entries and unit columns.

    Raises:
        InvalidConfigError: If *n* or *n_atoms* is below 1.
    """
    if n < 1 or n_atoms < 1:
        msg = f"dictionary shape must be positive, got ({n}, {n_atoms})"
        raise InvalidConfigError(msg)
    rng = np.random.default_rng(seed)
    return Dictionary.from_columns(rng.standard_normal((n, n_atoms)))


def restricted_error(
    Y: FloatArray, D: FloatArray, X: FloatArray, k: int, omega: NDArray[np.intp]
) -> FloatArray:
    """``E_kR``: the error without atom *k*, restricted to the samples in *omega*."""
    return Y[:, omega] - D @ X[:, omega] + np.outer(D[:, k], X[k, omega])


def _top_left_vector(E: FloatArray, *, with_second: bool = True) -> EigenPair:
    # E^T E has the same nonzero spectrum and is smaller when |omega| < n.
    if E.shape[1] < E.shape[0]:
        pair = reference_top_eigenpair(E.T @ E, with_second=with_second)
        return EigenPair(
            value=pair.value,
            vector=unit(E @ pair.vector),
            second_value=pair.second_value,
            degenerate=pair.degenerate,
            iterations=pair.iterations,
        )
    return reference_top_eigenpair(E @ E.T, with_second=with_second)


def atom_update(
    E_kR: FloatArray,
    d_ref: FloatArray,
    *,
    power_iterations: int | None = None,
    q_init: FloatArray | None = None,
    with_second: bool = False,
) -> AtomUpdate:
    """Best rank-1 factor ``d x_row`` of a restricted error matrix.

    ``d`` is the dominant eigenvector of ``E E^T`` oriented so that
    ``<d_ref, d> >= 0`` and ``x_row = d^T E``. With *power_iterations* the
    eigenvector is approximated by that many power steps from *q_init*.
    *with_second* also computes the second eigenvalue in tight mode.

    Raises:
        EmptyEnergyError: If ``||E_kR||_F < 1e-12``.
        PowerCollapseError: If a budget power iterate vanishes.
    """
    E = np.asarray(E_kR, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] < 1:
        msg = "restricted error matrix needs at least one column"
        raise InvalidConfigError(msg)
    if float(np.sqrt(np.sum(E * E))) < EMPTY_ENERGY_TOL:
        msg = "restricted error matrix has no energy"
        raise EmptyEnergyError(msg)

    eigen: EigenPair | None = None
    if power_iterations is None:
        eigen = _top_left_vector(E, with_second=with_second)
        d = eigen.vector
    else:
        if q_init is None:
            msg = "a budget atom update needs q_init"
            raise InvalidConfigError(msg)
        d = power_method(E @ E.T, q_init, power_iterations)

    d = sign_align(d_ref, d)
    return AtomUpdate(d=d, x_row=d @ E, eigen=eigen)


@dataclass
class _Sweep:
    """Mutable state shared by the atom updates of one iteration."""

    Y: FloatArray
    D: FloatArray
    X: FloatArray
    cfg: KsvdConfig
    d_ref: FloatArray
    streams: SeedStreams
    reinitialized: list[int] = field(default_factory=list)


def _worst_sample_atom(sweep: _Sweep) -> FloatArray:
    residual = sweep.Y - sweep.D @ sweep.X
    norms = np.sqrt(np.sum(residual * residual, axis=0))
    worst = int(np.argmax(norms))
    if norms[worst] < WORST_SAMPLE_TOL:
        return unit_gaussian(sweep.streams.reinit, sweep.D.shape[0])
    return unit(residual[:, worst])


def reinitialize_atom(sweep: _Sweep, k: int, omega: NDArray[np.intp]) -> None:
    """Replace atom *k* by the configured unused-atom rule and clear its codes."""
    if sweep.cfg.unused_atom_rule == "worst_sample":
        sweep.D[:, k] = _worst_sample_atom(sweep)
    else:
        sweep.D[:, k] = unit_gaussian(sweep.streams.reinit, sweep.D.shape[0])
    sweep.X[k, omega] = 0.0
    sweep.reinitialized.append(k)


def update_atom(sweep: _Sweep, k: int) -> EigenPair | None:
    """Update atom *k* and its coefficient row in place.

    Returns the eigenpair of the restricted error Gram when the tight solver
    produced one.
    """
    omega = np.flatnonzero(sweep.X[k])
    q_init = None
    if sweep.cfg.power_iterations is not None:
        # drawn for every atom so the stream stays aligned with cloud runs
        q_init = unit_gaussian(sweep.streams.power_init, sweep.D.shape[0])

    if omega.size == 0:
        reinitialize_atom(sweep, k, omega)
        return None

    E = restricted_error(sweep.Y, sweep.D, sweep.X, k, omega)
    try:
        update = atom_update(
            E,
            sweep.d_ref,
            power_iterations=sweep.cfg.power_iterations,
            q_init=q_init,
            with_second=sweep.cfg.record_snapshots,
        )
    except (EmptyEnergyError, PowerCollapseError):
        reinitialize_atom(sweep, k, omega)
        return None
    sweep.D[:, k] = update.d
    sweep.X[k, omega] = update.x_row
    return update.eigen


def _block_norms(sweep: _Sweep, k: int, site_sizes: tuple[int, ...]) -> FloatArray:
    E = sweep.Y - sweep.D @ sweep.X + np.outer(sweep.D[:, k], sweep.X[k])
    bounds = np.cumsum((0, *site_sizes))
    return np.array(
        [spectral_norm(E[:, bounds[i] : bounds[i + 1]]) for i in range(len(site_sizes))]
    )


def _spectrum(sweep: _Sweep, k: int, eigen: EigenPair | None) -> tuple[float, float]:
    if eigen is None:
        omega = np.flatnonzero(sweep.X[k])
        if omega.size == 0:
            return float("nan"), float("nan")
        E = restricted_error(sweep.Y, sweep.D, sweep.X, k, omega)
        eigen = _top_left_vector(E)
    return eigen.value, float(eigen.second_value or 0.0)


def _ksvd_step(
    Y: FloatArray,
    D: FloatArray,
    cfg: KsvdConfig,
    *,
    d_ref: FloatArray,
    streams: SeedStreams,
    iteration: int,
    site_sizes: tuple[int, ...],
) -> tuple[FloatArray, FloatArray, IterationRecord]:
    coding = encode_batch(Y, D, cfg.coding)
    record_snapshots = cfg.record_snapshots
    sweep = _Sweep(Y=Y, D=D.copy(), X=coding.codes.copy(), cfg=cfg, d_ref=d_ref, streams=streams)
    usage = np.count_nonzero(coding.codes, axis=1).astype(np.intp)

    n_atoms = D.shape[1]
    spectra = np.full((n_atoms, 2), np.nan) if record_snapshots else None
    block_norms = np.zeros((n_atoms, len(site_sizes))) if record_snapshots else None

    for k in range(n_atoms):
        if block_norms is not None:
            block_norms[k] = _block_norms(sweep, k, site_sizes)
        if spectra is not None and cfg.power_iterations is not None:
            spectra[k] = _spectrum(sweep, k, None)
        eigen = update_atom(sweep, k)
        if spectra is not None and cfg.power_iterations is None and eigen is not None:
            spectra[k] = _spectrum(sweep, k, eigen)

    if sweep.reinitialized:
        logger.warning("atom_reinitialized", iteration=iteration, atoms=sweep.reinitialized)

    record = IterationRecord(
        iteration=iteration,
        error=residual_norm_sum(Y, sweep.D, sweep.X) / (Y.shape[0] * Y.shape[1]),
        usage=usage,
        reinitialized=list(sweep.reinitialized),
    )
    if record_snapshots:
        record.dictionary = sweep.D.copy()
        record.coding_dictionary = D.copy()
        record.codes = coding.codes
        record.taus = coding.taus
        record.spectra = spectra
        record.block_norms = block_norms
    return sweep.D, sweep.X, record


def _check_data(Y: FloatArray, n: int) -> FloatArray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != n or Y.shape[1] < 1:
        msg = f"data shape {Y.shape} does not match dimension {n}"
        raise InvalidConfigError(msg)
    return Y


def ksvd_iteration(
    Y: FloatArray,
    D: Dictionary,
    cfg: KsvdConfig,
    *,
    d_ref: FloatArray | None = None,
    streams: SeedStreams | None = None,
) -> tuple[Dictionary, FloatArray]:
    """One sparse-coding stage followed by one sweep over all atoms.

    Returns the updated dictionary and the ``K x S`` codes after their rows
    were rewritten by the atom updates.
    """
    Y = _check_data(Y, D.n)
    D_new, X, _ = _ksvd_step(
        Y,
        D.atoms,
        cfg,
        d_ref=reference_vector(D.n, cfg.seed) if d_ref is None else d_ref,
        streams=streams or SeedStreams.from_seed(cfg.seed),
        iteration=1,
        site_sizes=(Y.shape[1],),
    )
    return Dictionary(D_new), X


def run_ksvd(
    Y: FloatArray,
    cfg: KsvdConfig,
    *,
    initial: Dictionary | None = None,
    site_sizes: Sequence[int] | None = None,
    d_ref: FloatArray | None = None,
) -> tuple[Dictionary, LearnTrace]:
    """Run ``cfg.dict_iters`` K-SVD iterations on the columns of *Y*.

    Starts from ``init_dictionary(n, K, seed)`` unless *initial* is given
    (warm start); *d_ref* defaults to the seeded reference vector.
    *site_sizes* partitions the columns by site for the per-site block norms
    recorded with snapshots.

    Raises:
        InvalidConfigError: If the data or *initial* do not match the config.
    """
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    Y = _check_data(Y, n)
    sizes = tuple(site_sizes) if site_sizes is not None else (Y.shape[1],)
    if sum(sizes) != Y.shape[1]:
        msg = f"site sizes {sizes} do not add up to {Y.shape[1]} samples"
        raise InvalidConfigError(msg)

    dictionary = initial if initial is not None else init_dictionary(n, cfg.n_atoms, cfg.seed)
    if dictionary.n != n or dictionary.n_atoms != cfg.n_atoms:
        msg = f"initial dictionary shape {dictionary.atoms.shape} does not match the config"
        raise InvalidConfigError(msg)

    if d_ref is None:
        d_ref = reference_vector(n, cfg.seed)
    streams = SeedStreams.from_seed(cfg.seed)
    trace = LearnTrace(config=cfg, site_sizes=sizes)
    if cfg.record_snapshots:
        trace.data = Y

    D = dictionary.atoms
    for t in range(1, cfg.dict_iters + 1):
        D, _, record = _ksvd_step(
            Y, D, cfg, d_ref=d_ref, streams=streams, iteration=t, site_sizes=sizes
        )
        trace.records.append(record)
        logger.debug("ksvd_iteration", iteration=t, error=record.error)

    logger.info(
        "ksvd_finished",
        iterations=cfg.dict_iters,
        final_error=trace.errors[-1],
        budget=cfg.power_iterations,
    )
    return Dictionary(D), trace


def run_local_ksvd(
    sites: Sequence[FloatArray],
    cfg: KsvdConfig,
    *,
    pool: SitePool | None = None,
) -> list[tuple[Dictionary, LearnTrace]]:
    """Learn one dictionary per site from its own data only, all with the shared seed."""
    pool = pool or SerialSitePool()
    return pool.map(lambda Y: run_ksvd(Y, cfg), list(sites))


@dataclass
class OnlinePeriod:
    """One arrival period of online K-SVD."""

    period: int
    arrived: int
    buffer_size: int
    dictionary: Dictionary
    trace: LearnTrace


def run_online_ksvd(
    batches: Sequence[FloatArray],
    cfg: KsvdConfig,
    *,
    buffer_limit: int,
) -> list[OnlinePeriod]:
    """Online K-SVD over arriving mini-batches.

    The training set is a FIFO buffer holding the newest ``buffer_limit``
    samples; each period runs ``cfg.dict_iters`` iterations warm-started from
    the previous period's dictionary.
    """
    if buffer_limit < 1:
        msg = f"buffer limit must be positive, got {buffer_limit}"
        raise InvalidConfigError(msg)

    periods: list[OnlinePeriod] = []
    buffer: FloatArray | None = None
    dictionary: Dictionary | None = None
    arrived = 0
    for period, batch in enumerate(batches, start=1):
        batch = np.asarray(batch, dtype=np.float64)
        arrived += batch.shape[1]
        buffer = batch if buffer is None else np.concatenate([buffer, batch], axis=1)
        buffer = buffer[:, -buffer_limit:]

        dictionary, trace = run_ksvd(buffer, cfg, initial=dictionary)
        periods.append(
            OnlinePeriod(
                period=period,
                arrived=arrived,
                buffer_size=buffer.shape[1],
                dictionary=dictionary,
                trace=trace,
            )
        )
        logger.info(
            "online_period_finished",
            period=period,
            buffer_size=buffer.shape[1],
            final_error=trace.errors[-1],
        )
    return periods

