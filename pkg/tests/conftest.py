"""Shared fixtures: seeded generators, small dictionaries, networks and site data."""

from __future__ import annotations

import struct
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from app.services.dictionary_learning import Dictionary
from app.services.network import Topology, WeightMatrix, local_degree_weights
from app.services.synthetic import SyntheticSites, generate_sites


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240101)


@pytest.fixture
def small_dictionary() -> Dictionary:
    """An 8 x 12 dictionary with unit-norm Gaussian columns."""
    return Dictionary.from_columns(np.random.default_rng(1).standard_normal((8, 12)))


@pytest.fixture
def small_sites() -> SyntheticSites:
    """Three sites of 20 noisy 2-sparse samples over a 8 x 12 ground truth."""
    return generate_sites(
        n=8, n_atoms=12, n_sites=3, samples_per_site=20, sparsity=2, noise_var=0.01, seed=7
    )


@pytest.fixture
def ring_weights() -> WeightMatrix:
    """Local-degree weights on the 4-cycle 0-1-2-3-0."""
    return local_degree_weights(Topology.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)]))


@pytest.fixture
def single_site() -> WeightMatrix:
    return local_degree_weights(Topology.complete(1))


@pytest.fixture
def write_idx(tmp_path: Path) -> Callable[..., Path]:
    """Write an IDX file byte by byte: big-endian magic, dimensions, then raw bytes."""

    def _write(name: str, magic: int, dims: tuple[int, ...], payload: bytes) -> Path:
        path = tmp_path / name
        header = struct.pack(f">I{len(dims)}I", magic, *dims)
        path.write_bytes(header + payload)
        return path

    return _write
