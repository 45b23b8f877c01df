"""Simulated site network: random topologies, local-degree weights and consensus.

A consensus round is a barrier. Every site reads its neighbours' previous
values and all sites write the new values at once, which for a weight matrix
``W`` is exactly ``Z <- W Z`` on the stacked per-site vectors.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import structlog
from numpy.typing import NDArray

from app.exceptions import (
    CorrectionUnderflowError,
    InvalidConfigError,
    InvalidInputError,
    MixingTimeOverflowError,
    TopologyGenerationError,
)
from app.services.linalg import FloatArray, l2_norm

logger = structlog.get_logger()

MAX_TOPOLOGY_ATTEMPTS = 1000
STOCHASTIC_TOL = 1e-12
CORRECTION_TOL = 1e-14
MIXING_TIME_CAP = 10_000


@dataclass(frozen=True)
class Topology:
    """Undirected connected graph over sites ``0..N-1``; every site is its own neighbour."""

    adjacency: NDArray[np.bool_]

    def __post_init__(self) -> None:
        adjacency = np.asarray(self.adjacency, dtype=bool)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            msg = f"adjacency must be square, got shape {adjacency.shape}"
            raise InvalidInputError(msg)
        if not np.array_equal(adjacency, adjacency.T):
            msg = "adjacency must be symmetric"
            raise InvalidInputError(msg)
        if not np.all(np.diag(adjacency)):
            msg = "every site must be its own neighbour"
            raise InvalidInputError(msg)
        object.__setattr__(self, "adjacency", adjacency)
        if not nx.is_connected(self.graph):
            msg = "topology is not connected"
            raise InvalidInputError(msg)

    @property
    def n_sites(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def graph(self) -> nx.Graph:
        """The topology as a networkx graph without self-loops."""
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_sites))
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        graph.add_edges_from(zip(rows.tolist(), cols.tolist(), strict=True))
        return graph

    @property
    def n_edges(self) -> int:
        """Undirected edges, self-loops excluded."""
        return int(np.count_nonzero(np.triu(self.adjacency, k=1)))

    def neighbors(self, site: int) -> list[int]:
        return np.flatnonzero(self.adjacency[site]).tolist()

    @classmethod
    def from_edges(cls, n_sites: int, edges: Iterable[tuple[int, int]]) -> Topology:
        adjacency = np.eye(n_sites, dtype=bool)
        for i, j in edges:
            adjacency[i, j] = adjacency[j, i] = True
        return cls(adjacency)

    @classmethod
    def complete(cls, n_sites: int) -> Topology:
        return cls(np.ones((n_sites, n_sites), dtype=bool))


@dataclass(frozen=True)
class WeightMatrix:
    """Doubly-stochastic, non-negative weights supported on a topology's edges."""

    matrix: FloatArray
    topology: Topology

    def __post_init__(self) -> None:
        W = np.asarray(self.matrix, dtype=np.float64)
        n = self.topology.n_sites
        if W.shape != (n, n):
            msg = f"weight matrix shape {W.shape} does not match {n} sites"
            raise InvalidInputError(msg)
        if not np.all(np.isfinite(W)) or np.any(W < 0.0):
            msg = "weights must be finite and non-negative"
            raise InvalidInputError(msg)
        if np.any(W[~self.topology.adjacency] != 0.0):
            msg = "weights must vanish off the topology's edges"
            raise InvalidInputError(msg)
        if np.max(np.abs(W.sum(axis=1) - 1.0)) > STOCHASTIC_TOL:
            msg = "weight rows must sum to one"
            raise InvalidInputError(msg)
        if np.max(np.abs(W.sum(axis=0) - 1.0)) > STOCHASTIC_TOL:
            msg = "weight columns must sum to one"
            raise InvalidInputError(msg)
        object.__setattr__(self, "matrix", W)

    @property
    def n_sites(self) -> int:
        return self.topology.n_sites


@dataclass
class ConsensusRun:
    """Outcome of ``rounds`` corrected consensus rounds.

    ``corrections[i]`` is ``[W^rounds e_1]_i``; ``estimates[i]`` is site
    ``i``'s estimate of the network sum. Sites listed in ``uncorrected`` kept
    their raw iterate because the correction underflowed.
    """

    initial: FloatArray
    rounds: int
    estimates: FloatArray
    corrections: FloatArray
    messages: int
    uncorrected: list[int] = field(default_factory=list)


def gen_erdos_renyi_connected(n_sites: int, p: float, seed: int) -> Topology:
    """Connected Erdos-Renyi graph: each pair joins independently with probability *p*.

    Disconnected draws are discarded and the same generator keeps drawing.

    Raises:
        InvalidConfigError: If ``n_sites < 1`` or *p* is outside ``(0, 1]``.
        TopologyGenerationError: After 1000 disconnected draws.
    """
    if n_sites < 1 or not 0.0 < p <= 1.0:
        msg = f"need n_sites >= 1 and 0 < p <= 1, got ({n_sites}, {p})"
        raise InvalidConfigError(msg)

    rng = np.random.default_rng(seed)
    upper = np.triu(np.ones((n_sites, n_sites), dtype=bool), k=1)
    for attempt in range(1, MAX_TOPOLOGY_ATTEMPTS + 1):
        draws = (rng.random((n_sites, n_sites)) < p) & upper
        adjacency = draws | draws.T | np.eye(n_sites, dtype=bool)
        graph = nx.from_numpy_array(adjacency.astype(np.int8))
        if nx.is_connected(graph):
            if attempt > 1:
                logger.debug("topology_resampled", attempts=attempt, n_sites=n_sites, p=p)
            return Topology(adjacency)

    msg = f"no connected graph in {MAX_TOPOLOGY_ATTEMPTS} draws (N={n_sites}, p={p})"
    raise TopologyGenerationError(msg)


def local_degree_weights(topology: Topology) -> WeightMatrix:
    """Local-degree (Metropolis) weights ``w_ij = 1 / (1 + max(deg_i, deg_j))``.

    Degrees count neighbours other than the site itself; the self weight takes
    up the remainder of each row.
    """
    graph = topology.graph
    n = topology.n_sites
    degrees = np.array([graph.degree[i] for i in range(n)])
    W = np.zeros((n, n))
    for i, j in sorted(graph.edges()):
        W[i, j] = W[j, i] = 1.0 / (1.0 + max(degrees[i], degrees[j]))
    for i in range(n):
        W[i, i] = 1.0 - float(np.sum(W[i]))
    return WeightMatrix(matrix=W, topology=topology)


def consensus_rounds(z_init: FloatArray, W: WeightMatrix, rounds: int) -> Iterator[FloatArray]:
    """Yield the uncorrected iterates ``W^t Z`` for ``t = 1..rounds``.

    *z_init* stacks one vector per site as rows.
    """
    Z = np.asarray(z_init, dtype=np.float64)
    for _ in range(rounds):
        Z = W.matrix @ Z
        yield Z


def consensus_sum(
    z_init: FloatArray,
    W: WeightMatrix,
    rounds: int,
    *,
    allow_uncorrected: bool = False,
) -> ConsensusRun:
    """Estimate the network sum of the per-site vectors by corrected consensus.

    After *rounds* averaging rounds site ``i`` divides its iterate by
    ``[W^rounds e_1]_i``, which the same rounds drive to ``1/N``.

    Args:
        z_init: ``N x d`` array, one row per site (a 1-D array is one scalar
            per site).
        W: Weight matrix of the network.
        rounds: Number of consensus rounds ``T_c >= 1``.
        allow_uncorrected: Return the raw iterate at sites whose correction
            underflows instead of raising. Callers that normalize the result
            lose nothing by this.

    Raises:
        InvalidConfigError: If *rounds* < 1 or the rows do not match the sites.
        CorrectionUnderflowError: If a correction is below 1e-14 and
            *allow_uncorrected* is false.
    """
    if rounds < 1:
        msg = f"consensus needs at least one round, got {rounds}"
        raise InvalidConfigError(msg)
    initial = np.asarray(z_init, dtype=np.float64)
    scalar = initial.ndim == 1
    Z0 = initial[:, None] if scalar else initial
    if Z0.ndim != 2 or Z0.shape[0] != W.n_sites:
        msg = f"expected one row per site ({W.n_sites}), got shape {initial.shape}"
        raise InvalidConfigError(msg)

    Z = Z0
    for Z in consensus_rounds(Z0, W, rounds):
        pass

    e1 = np.zeros(W.n_sites)
    e1[0] = 1.0
    corrections = e1
    for corrections in consensus_rounds(e1, W, rounds):
        pass

    estimates = np.array(Z, copy=True)
    underflow = np.flatnonzero(corrections < CORRECTION_TOL).tolist()
    if underflow and not allow_uncorrected:
        msg = f"consensus correction underflow at sites {underflow} after {rounds} rounds"
        raise CorrectionUnderflowError(msg)
    for i in range(W.n_sites):
        if i not in underflow:
            estimates[i] = Z[i] / corrections[i]

    return ConsensusRun(
        initial=initial,
        rounds=rounds,
        estimates=estimates[:, 0] if scalar else estimates,
        corrections=corrections,
        messages=rounds * 2 * W.topology.n_edges,
        uncorrected=underflow,
    )


def estimate_mixing_time(W: WeightMatrix) -> int:
    """Smallest ``t >= 1`` with ``||e_i^T W^t - 1^T/N||_2 <= 1/2`` at every site.

    Raises:
        MixingTimeOverflowError: If no ``t`` up to 10,000 qualifies.
    """
    n = W.n_sites
    uniform = np.full(n, 1.0 / n)
    power = W.matrix.copy()
    for t in range(1, MIXING_TIME_CAP + 1):
        if max(l2_norm(power[i] - uniform) for i in range(n)) <= 0.5:
            return t
        power = power @ W.matrix
    msg = f"mixing time exceeds {MIXING_TIME_CAP}"
    raise MixingTimeOverflowError(msg)


def write_matrix(path: Path, matrix: FloatArray) -> None:
    """Write a square matrix as text: ``N`` on the first line, then ``N`` rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    lines = [str(matrix.shape[0])]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in matrix)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix(path: Path) -> FloatArray:
    """Read a matrix written by ``write_matrix``.

    Raises:
        InvalidInputError: If the row count or row widths disagree with ``N``.
    """
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        msg = f"{path}: empty matrix file"
        raise InvalidInputError(msg)
    n = int(lines[0])
    rows = [[float(v) for v in line.split()] for line in lines[1:]]
    if len(rows) != n or any(len(row) != n for row in rows):
        msg = f"{path}: expected {n} rows of {n} values"
        raise InvalidInputError(msg)
    return np.array(rows, dtype=np.float64)


def save_network(directory: Path, W: WeightMatrix) -> None:
    """Store the adjacency and weights of a run for reproduction."""
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix(directory / "topology.txt", W.topology.adjacency.astype(np.float64))
    write_matrix(directory / "weights.txt", W.matrix)


def load_network(directory: Path) -> WeightMatrix:
    adjacency = read_matrix(directory / "topology.txt") != 0.0
    weights = read_matrix(directory / "weights.txt")
    return WeightMatrix(matrix=weights, topology=Topology(adjacency))
