"""Cloud K-SVD: collaborative dictionary learning over a simulated network.

Sites never exchange data. Each site codes its own samples, and every atom
update is a distributed power method on ``sum_i E_i E_i^T`` whose matrix-vector
products are summed across sites by corrected consensus. All sites share the
initial dictionary, the sign reference and the per-atom power-method start,
so every site ends with its own estimate of the same dictionary.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import structlog
from numpy.typing import NDArray

from app.exceptions import InvalidConfigError, PowerCollapseError
from app.schemas.config import CloudConfig, KsvdConfig
from app.services.dictionary_learning import Dictionary, init_dictionary, restricted_error
from app.services.linalg import COLLAPSE_TOL, FloatArray, l2_norm, residual_norm_sum
from app.services.linalg import sign_align as sign_align
from app.services.network import WeightMatrix, consensus_sum
from app.services.seeding import SeedStreams, reference_vector, unit_gaussian
from app.services.site_pool import SerialSitePool, SitePool
from app.services.sparse_coding import CodingResult, encode_batch

logger = structlog.get_logger()


@dataclass
class SiteState:
    """One site's private data and its working copies of the dictionary and codes."""

    site: int
    data: FloatArray
    atoms: FloatArray
    codes: FloatArray

    @property
    def dictionary(self) -> Dictionary:
        return Dictionary(self.atoms.copy())

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])


@dataclass
class PowerRun:
    """Final per-site unit vectors of a distributed power method (rows)."""

    estimates: FloatArray
    corrections: FloatArray
    messages: int
    uncorrected: list[int] = field(default_factory=list)
    stalled: list[int] = field(default_factory=list)
    history: list[FloatArray] = field(default_factory=list)


@dataclass
class AtomRecord:
    """What happened while updating atom ``atom`` in iteration ``iteration``."""

    iteration: int
    atom: int
    q_init: FloatArray
    estimates: FloatArray
    corrections: FloatArray
    part_norms: FloatArray
    support_sizes: NDArray[np.intp]
    messages: int
    reinitialized: bool = False
    stalled: list[int] = field(default_factory=list)
    parts: list[FloatArray] | None = None


@dataclass
class CloudIteration:
    iteration: int
    error: float
    site_errors: FloatArray
    dictionaries: FloatArray | None = None
    codes: list[FloatArray] | None = None


@dataclass
class CloudTrace:
    """Everything a cloud run records, per (t, k) and per iteration."""

    config: CloudConfig
    site_sizes: tuple[int, ...]
    d_ref: FloatArray
    atoms: list[AtomRecord] = field(default_factory=list)
    iterations: list[CloudIteration] = field(default_factory=list)

    @property
    def n_sites(self) -> int:
        return len(self.site_sizes)

    @property
    def errors(self) -> list[float]:
        return [it.error for it in self.iterations]

    @property
    def total_messages(self) -> int:
        return sum(record.messages for record in self.atoms)

    def atom(self, iteration: int, k: int) -> AtomRecord:
        return self.atoms[(iteration - 1) * self.config.n_atoms + k]


def distributed_power_method(
    M_parts: Sequence[FloatArray],
    W: WeightMatrix,
    power_iters: int,
    consensus_iters: int,
    q_init: FloatArray,
    *,
    record_history: bool = False,
) -> PowerRun:
    """Estimate the dominant eigenvector of ``sum_i M_i`` at every site.

    Each iteration every site multiplies its current estimate by its own
    ``M_i``; consensus sums the products across the network and each site
    normalizes its corrected sum. All sites start from *q_init*. A site whose
    sum estimate drops below 1e-14 keeps its previous iterate for that step
    and is listed in ``PowerRun.stalled``; this happens when T_c is shorter
    than the distance to the nearest site that uses the atom.

    Raises:
        InvalidConfigError: If the parts do not match the network.
        PowerCollapseError: If the sum estimate vanishes at every site in the
            same step.
    """
    if len(M_parts) != W.n_sites:
        msg = f"{len(M_parts)} matrix parts for {W.n_sites} sites"
        raise InvalidConfigError(msg)
    n = q_init.shape[0]
    Q = np.tile(np.asarray(q_init, dtype=np.float64), (W.n_sites, 1))
    history: list[FloatArray] = []
    messages = 0
    corrections = np.ones(W.n_sites)
    uncorrected: set[int] = set()
    stalled: set[int] = set()

    for step in range(1, power_iters + 1):
        V = np.zeros((W.n_sites, n))
        for i, M in enumerate(M_parts):
            V[i] = M @ Q[i]
        run = consensus_sum(V, W, consensus_iters, allow_uncorrected=True)
        messages += run.messages
        corrections = run.corrections
        uncorrected.update(run.uncorrected)

        norms = [l2_norm(run.estimates[i]) for i in range(W.n_sites)]
        collapsed = [i for i, norm in enumerate(norms) if norm < COLLAPSE_TOL]
        if len(collapsed) == W.n_sites:
            msg = f"power iterate vanished at sites {collapsed} in step {step}"
            raise PowerCollapseError(msg, sites=collapsed, iteration=step)
        stalled.update(collapsed)
        for i in range(W.n_sites):
            if norms[i] >= COLLAPSE_TOL:
                Q[i] = run.estimates[i] / norms[i]
        if record_history:
            history.append(Q.copy())

    if uncorrected:
        logger.debug("consensus_uncorrected", sites=sorted(uncorrected))
    if stalled:
        logger.debug("power_iterate_stalled", sites=sorted(stalled))
    return PowerRun(
        estimates=Q,
        corrections=corrections,
        messages=messages,
        uncorrected=sorted(uncorrected),
        stalled=sorted(stalled),
        history=history,
    )


def matched_ksvd_config(cfg: CloudConfig) -> KsvdConfig:
    """Centralized config that spends the same power-iteration budget per atom."""
    return KsvdConfig(
        n_atoms=cfg.n_atoms,
        dict_iters=cfg.dict_iters,
        seed=cfg.seed,
        coding=cfg.coding,
        power_iterations=cfg.power_iters,
        unused_atom_rule="shared_stream",
    )


def _init_sites(
    sites: Sequence[FloatArray], W: WeightMatrix, initial: Dictionary
) -> list[SiteState]:
    if len(sites) != W.n_sites:
        msg = f"{len(sites)} data sets for a {W.n_sites}-site network"
        raise InvalidConfigError(msg)
    states = []
    for i, Y in enumerate(sites):
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[0] != initial.n or Y.shape[1] < 1:
            msg = f"site {i} data shape {Y.shape} does not match dimension {initial.n}"
            raise InvalidConfigError(msg)
        states.append(
            SiteState(
                site=i,
                data=Y,
                atoms=initial.atoms.copy(),
                codes=np.zeros((initial.n_atoms, Y.shape[1])),
            )
        )
    return states


def _update_atom(
    states: list[SiteState],
    W: WeightMatrix,
    cfg: CloudConfig,
    k: int,
    iteration: int,
    d_ref: FloatArray,
    streams: SeedStreams,
) -> AtomRecord:
    n = d_ref.shape[0]
    q_init = unit_gaussian(streams.power_init, n)

    omegas = [np.flatnonzero(state.codes[k]) for state in states]
    errors: list[FloatArray] = []
    parts: list[FloatArray] = []
    for state, omega in zip(states, omegas, strict=True):
        if omega.size:
            E = restricted_error(state.data, state.atoms, state.codes, k, omega)
            parts.append(E @ E.T)
        else:
            E = np.zeros((n, 0))
            parts.append(np.zeros((n, n)))
        errors.append(E)

    record = AtomRecord(
        iteration=iteration,
        atom=k,
        q_init=q_init,
        estimates=np.zeros((len(states), n)),
        corrections=np.ones(len(states)),
        part_norms=np.array([float(np.sqrt(np.sum(E * E))) for E in errors]),
        support_sizes=np.array([omega.size for omega in omegas], dtype=np.intp),
        messages=0,
        parts=[M.copy() for M in parts] if cfg.record_parts else None,
    )

    try:
        run = distributed_power_method(parts, W, cfg.power_iters, cfg.consensus_iters, q_init)
    except PowerCollapseError as exc:
        atom = unit_gaussian(streams.reinit, n)
        for state, omega in zip(states, omegas, strict=True):
            state.atoms[:, k] = atom
            state.codes[k, omega] = 0.0
        record.estimates[:] = atom
        record.messages = exc.iteration * cfg.consensus_iters * 2 * W.topology.n_edges
        record.reinitialized = True
        return record

    for i, (state, omega, E) in enumerate(zip(states, omegas, errors, strict=True)):
        d = sign_align(d_ref, run.estimates[i])
        state.atoms[:, k] = d
        if omega.size:
            state.codes[k, omega] = d @ E
        record.estimates[i] = d
    record.corrections = run.corrections
    record.messages = run.messages
    record.stalled = run.stalled
    return record


def cloud_ksvd_run(
    sites: Sequence[FloatArray],
    W: WeightMatrix,
    cfg: CloudConfig,
    *,
    initial: Dictionary | None = None,
    pool: SitePool | None = None,
) -> tuple[list[Dictionary], CloudTrace]:
    """Run cloud K-SVD over the network described by *W*.

    Every site starts from ``init_dictionary(n, K, seed)`` (or *initial*) and
    the shared ``d_ref``. Per iteration each site codes its data locally, then
    atoms are updated one at a time by the distributed power method with a
    fresh shared ``q_init``; an atom whose power iterate vanishes everywhere
    (no site uses it) is redrawn from the shared re-init stream at all sites.

    Raises:
        InvalidConfigError: If the site data disagree on dimension or count.
    """
    pool = pool or SerialSitePool()
    n = int(np.asarray(sites[0]).shape[0]) if sites else 0
    if n < 1:
        msg = "cloud K-SVD needs at least one site with data"
        raise InvalidConfigError(msg)
    dictionary = initial if initial is not None else init_dictionary(n, cfg.n_atoms, cfg.seed)
    if dictionary.n_atoms != cfg.n_atoms:
        msg = f"initial dictionary has {dictionary.n_atoms} atoms, config says {cfg.n_atoms}"
        raise InvalidConfigError(msg)
    states = _init_sites(sites, W, dictionary)

    d_ref = reference_vector(n, cfg.seed) if cfg.d_ref is None else np.asarray(cfg.d_ref)
    if d_ref.shape != (n,):
        msg = f"d_ref has length {d_ref.shape[0]}, data dimension is {n}"
        raise InvalidConfigError(msg)
    streams = SeedStreams.from_seed(cfg.seed)
    sizes = tuple(state.n_samples for state in states)
    trace = CloudTrace(config=cfg, site_sizes=sizes, d_ref=d_ref)
    total_samples = sum(sizes)

    for t in range(1, cfg.dict_iters + 1):
        coded: list[CodingResult] = pool.map(
            lambda state: encode_batch(state.data, state.atoms, cfg.coding), states
        )
        for state, result in zip(states, coded, strict=True):
            state.codes = result.codes.copy()

        for k in range(cfg.n_atoms):
            trace.atoms.append(_update_atom(states, W, cfg, k, t, d_ref, streams))

        residuals = np.array(
            [residual_norm_sum(state.data, state.atoms, state.codes) for state in states]
        )
        iteration = CloudIteration(
            iteration=t,
            error=float(np.sum(residuals)) / (n * total_samples),
            site_errors=residuals / (n * np.asarray(sizes, dtype=np.float64)),
        )
        if cfg.record_dictionaries:
            iteration.dictionaries = np.stack([state.atoms.copy() for state in states])
        if cfg.record_codes:
            iteration.codes = [result.codes for result in coded]
        trace.iterations.append(iteration)

        reinitialized = [r.atom for r in trace.atoms[-cfg.n_atoms :] if r.reinitialized]
        if reinitialized:
            logger.warning("atom_reinitialized", iteration=t, atoms=reinitialized)
        logger.debug("cloud_ksvd_iteration", iteration=t, error=iteration.error)

    logger.info(
        "cloud_ksvd_finished",
        sites=W.n_sites,
        iterations=cfg.dict_iters,
        final_error=trace.errors[-1],
        messages=trace.total_messages,
    )
    return [state.dictionary for state in states], trace
