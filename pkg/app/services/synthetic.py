"""Synthetic union-of-subspaces data spread over sites.

A ground-truth dictionary has columns uniform on the unit sphere. Each site
draws its own sub-dictionary and every local sample is a standard-normal
combination of ``T0`` of its atoms plus white Gaussian noise, normalized to
unit length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import structlog
from numpy.typing import NDArray

from app.exceptions import InvalidConfigError
from app.schemas.config import ExperimentConfig
from app.services.dictionary_learning import Dictionary
from app.services.linalg import FloatArray, l2_norm
from app.services.seeding import STREAM_SYNTHETIC, stream

logger = structlog.get_logger()


@dataclass
class SyntheticSites:
    """Ground truth plus per-site data, sub-dictionaries and chosen atoms."""

    dictionary: Dictionary
    sites: list[FloatArray]
    subdictionaries: list[NDArray[np.intp]]
    chosen: list[NDArray[np.intp]]

    @property
    def pooled(self) -> FloatArray:
        return np.concatenate(self.sites, axis=1)

    @property
    def site_sizes(self) -> tuple[int, ...]:
        return tuple(Y.shape[1] for Y in self.sites)


def subdictionary_size(n_atoms: int) -> int:
    """Atoms available to one site: 45 of 50, otherwise 90% rounded up."""
    return 45 if n_atoms == 50 else math.ceil(0.9 * n_atoms)


def generate_sites(
    *,
    n: int,
    n_atoms: int,
    n_sites: int,
    samples_per_site: int,
    sparsity: int,
    noise_var: float,
    seed: int,
) -> SyntheticSites:
    """Draw a ground-truth dictionary and ``n_sites`` blocks of unit-norm samples.

    Raises:
        InvalidConfigError: If a sub-dictionary cannot hold ``sparsity`` atoms.
    """
    size = subdictionary_size(n_atoms)
    if sparsity > size:
        msg = f"sparsity {sparsity} exceeds the sub-dictionary size {size}"
        raise InvalidConfigError(msg)

    rng = stream(seed, STREAM_SYNTHETIC)
    dictionary = Dictionary.from_columns(rng.standard_normal((n, n_atoms)))
    D = dictionary.atoms
    noise_std = math.sqrt(noise_var)

    sites: list[FloatArray] = []
    subdictionaries: list[NDArray[np.intp]] = []
    chosen: list[NDArray[np.intp]] = []
    for _ in range(n_sites):
        sub = np.sort(rng.choice(n_atoms, size=size, replace=False))
        Y = np.zeros((n, samples_per_site))
        picks = np.zeros((samples_per_site, sparsity), dtype=np.intp)
        for s in range(samples_per_site):
            idx = np.sort(rng.choice(sub, size=sparsity, replace=False))
            y = D[:, idx] @ rng.standard_normal(sparsity) + noise_std * rng.standard_normal(n)
            Y[:, s] = y / l2_norm(y)
            picks[s] = idx
        sites.append(Y)
        subdictionaries.append(sub)
        chosen.append(picks)

    logger.debug("synthetic_sites_generated", sites=n_sites, samples=samples_per_site, n=n)
    return SyntheticSites(
        dictionary=dictionary, sites=sites, subdictionaries=subdictionaries, chosen=chosen
    )


def gen_synthetic_sites(cfg: ExperimentConfig, seed: int) -> SyntheticSites:
    """Synthetic sites with the shapes of an experiment config."""
    return generate_sites(
        n=cfg.dim,
        n_atoms=cfg.atoms,
        n_sites=cfg.sites,
        samples_per_site=cfg.samples_per_site,
        sparsity=cfg.sparsity,
        noise_var=cfg.noise_var,
        seed=seed,
    )
