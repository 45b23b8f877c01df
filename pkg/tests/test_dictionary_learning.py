"""Tests for centralized, local and online K-SVD."""

import numpy as np
import pytest
from pydantic import ValidationError

from app.exceptions import EmptyEnergyError, InvalidConfigError, InvalidDictionaryError
from app.schemas.config import CodingConfig, KsvdConfig
from app.services.dictionary_learning import (
    Dictionary,
    atom_update,
    init_dictionary,
    ksvd_iteration,
    restricted_error,
    run_ksvd,
    run_local_ksvd,
    run_online_ksvd,
)
from app.services.linalg import unit
from app.services.sparse_coding import encode_batch
from app.services.synthetic import SyntheticSites


def _config(**overrides: object) -> KsvdConfig:
    values: dict[str, object] = {
        "n_atoms": 12,
        "dict_iters": 3,
        "seed": 5,
        "coding": CodingConfig(sparsity=2),
    }
    values.update(overrides)
    return KsvdConfig.model_validate(values)


class TestDictionary:
    """Unit-norm dictionaries and their seeded initialisation."""

    def test_init_is_deterministic(self) -> None:
        a = init_dictionary(8, 12, seed=3)
        b = init_dictionary(8, 12, seed=3)
        np.testing.assert_array_equal(a.atoms, b.atoms)
        assert not np.array_equal(a.atoms, init_dictionary(8, 12, seed=4).atoms)

    def test_init_has_unit_columns(self) -> None:
        D = init_dictionary(8, 12, seed=3)
        assert D.atoms.shape == (8, 12)
        np.testing.assert_allclose(np.linalg.norm(D.atoms, axis=0), 1.0, atol=1e-12)

    def test_init_rejects_empty_shape(self) -> None:
        with pytest.raises(InvalidConfigError):
            init_dictionary(0, 4, seed=1)

    def test_rejects_non_unit_columns(self) -> None:
        with pytest.raises(InvalidDictionaryError):
            Dictionary(np.array([[1.0, 2.0], [0.0, 0.0]]))

    def test_from_columns_rejects_zero_column(self) -> None:
        with pytest.raises(InvalidDictionaryError):
            Dictionary.from_columns(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestAtomUpdate:
    """Rank-1 refit of one atom and its coefficient row."""

    def test_rank_one_is_recovered(self, rng: np.random.Generator) -> None:
        u = unit(rng.standard_normal(6))
        v = rng.standard_normal(9)
        update = atom_update(np.outer(u, v), u)
        np.testing.assert_allclose(update.d, u, atol=1e-8)
        np.testing.assert_allclose(update.x_row, v, atol=1e-8)

    def test_matches_leading_singular_vector(self, rng: np.random.Generator) -> None:
        E = rng.standard_normal((6, 10))
        d_ref = unit(rng.standard_normal(6))
        update = atom_update(E, d_ref)
        U, _, _ = np.linalg.svd(E)
        assert abs(float(update.d @ U[:, 0])) == pytest.approx(1.0, abs=1e-8)
        assert float(d_ref @ update.d) >= 0.0
        np.testing.assert_allclose(update.x_row, update.d @ E, atol=1e-12)

    def test_beats_random_directions(self, rng: np.random.Generator) -> None:
        E = rng.standard_normal((6, 10))
        update = atom_update(E, unit(np.ones(6)))
        best = np.linalg.norm(E - np.outer(update.d, update.x_row))
        for _ in range(100):
            d = unit(rng.standard_normal(6))
            assert best <= np.linalg.norm(E - np.outer(d, d @ E)) + 1e-9

    def test_budget_mode_approaches_tight_mode(self, rng: np.random.Generator) -> None:
        E = rng.standard_normal((6, 10))
        d_ref = unit(np.ones(6))
        tight = atom_update(E, d_ref)
        budget = atom_update(
            E, d_ref, power_iterations=300, q_init=unit(rng.standard_normal(6))
        )
        np.testing.assert_allclose(budget.d, tight.d, atol=1e-6)
        assert budget.eigen is None

    def test_zero_energy_rejected(self) -> None:
        with pytest.raises(EmptyEnergyError):
            atom_update(np.zeros((4, 3)), unit(np.ones(4)))

    def test_no_columns_rejected(self) -> None:
        with pytest.raises(InvalidConfigError):
            atom_update(np.zeros((4, 0)), unit(np.ones(4)))

    def test_budget_needs_start_vector(self, rng: np.random.Generator) -> None:
        with pytest.raises(InvalidConfigError):
            atom_update(rng.standard_normal((4, 3)), unit(np.ones(4)), power_iterations=3)

    def test_restricted_error_adds_back_the_atom(self, rng: np.random.Generator) -> None:
        Y = rng.standard_normal((4, 5))
        D = rng.standard_normal((4, 3))
        X = rng.standard_normal((3, 5))
        omega = np.array([0, 2, 4])
        expected = (Y - D[:, [0, 2]] @ X[[0, 2]])[:, omega]
        np.testing.assert_allclose(restricted_error(Y, D, X, 1, omega), expected, atol=1e-12)


class TestRunKsvd:
    """Centralized K-SVD over pooled data."""

    def test_dictionary_columns_are_a_fixed_point(self, small_dictionary: Dictionary) -> None:
        cfg = _config(coding=CodingConfig(sparsity=1), dict_iters=1)
        D, trace = run_ksvd(small_dictionary.atoms, cfg, initial=small_dictionary)
        assert trace.errors[0] < 1e-10
        overlap = np.abs(np.sum(D.atoms * small_dictionary.atoms, axis=0))
        np.testing.assert_allclose(overlap, 1.0, atol=1e-8)

    def test_single_atom_learns_repeated_sample(self, rng: np.random.Generator) -> None:
        y = unit(rng.standard_normal(8))
        Y = np.tile(y[:, None], (1, 50))
        D, trace = run_ksvd(Y, _config(n_atoms=1, coding=CodingConfig(sparsity=1)))
        assert abs(float(D.atoms[:, 0] @ y)) == pytest.approx(1.0, abs=1e-10)
        assert trace.errors[-1] < 1e-10

    def test_same_seed_gives_identical_traces(self, small_sites: SyntheticSites) -> None:
        cfg = _config()
        D1, trace1 = run_ksvd(small_sites.pooled, cfg)
        D2, trace2 = run_ksvd(small_sites.pooled, cfg)
        assert trace1.errors == trace2.errors
        np.testing.assert_array_equal(D1.atoms, D2.atoms)

    def test_atoms_stay_unit_norm(self, small_sites: SyntheticSites) -> None:
        D, trace = run_ksvd(small_sites.pooled, _config())
        np.testing.assert_allclose(np.linalg.norm(D.atoms, axis=0), 1.0, atol=1e-10)
        assert len(trace.records) == 3
        assert all(record.usage.shape == (12,) for record in trace.records)

    def test_unused_atoms_are_reinitialized(self, rng: np.random.Generator) -> None:
        y = unit(rng.standard_normal(8))
        Y = np.tile(y[:, None], (1, 10))
        D, trace = run_ksvd(Y, _config(n_atoms=3, dict_iters=1, coding=CodingConfig(sparsity=1)))
        assert len(trace.records[0].reinitialized) == 2
        np.testing.assert_allclose(np.linalg.norm(D.atoms, axis=0), 1.0, atol=1e-10)

    def test_snapshots_record_spectra_and_block_norms(self, small_sites: SyntheticSites) -> None:
        cfg = _config(dict_iters=2, record_snapshots=True)
        _, trace = run_ksvd(small_sites.pooled, cfg, site_sizes=small_sites.site_sizes)
        assert trace.has_snapshots
        record = trace.records[0]
        assert record.spectra is not None and record.spectra.shape == (12, 2)
        assert record.block_norms is not None and record.block_norms.shape == (12, 3)
        assert record.coding_dictionary is not None

    def test_site_sizes_must_cover_samples(self, small_sites: SyntheticSites) -> None:
        with pytest.raises(InvalidConfigError):
            run_ksvd(small_sites.pooled, _config(), site_sizes=(20, 20))

    def test_initial_dictionary_shape_checked(
        self, small_sites: SyntheticSites, small_dictionary: Dictionary
    ) -> None:
        with pytest.raises(InvalidConfigError):
            run_ksvd(small_sites.pooled, _config(n_atoms=10), initial=small_dictionary)

    def test_single_iteration_matches_first_run_step(self, small_sites: SyntheticSites) -> None:
        cfg = _config(dict_iters=1)
        initial = init_dictionary(8, 12, cfg.seed)
        D_step, X = ksvd_iteration(small_sites.pooled, initial, cfg)
        D_run, _ = run_ksvd(small_sites.pooled, cfg)
        np.testing.assert_array_equal(D_step.atoms, D_run.atoms)
        assert X.shape == (12, small_sites.pooled.shape[1])


class TestAtomSweep:
    def test_error_never_grows_across_the_atom_loop(self, small_sites: SyntheticSites) -> None:
        Y = small_sites.pooled
        D = init_dictionary(8, 12, seed=5).atoms.copy()
        X = encode_batch(Y, D, CodingConfig(sparsity=2)).codes.copy()
        d_ref = unit(np.ones(8))
        previous = float(np.linalg.norm(Y - D @ X))
        for k in range(12):
            omega = np.flatnonzero(X[k])
            if omega.size == 0:
                continue
            update = atom_update(restricted_error(Y, D, X, k, omega), d_ref)
            D[:, k] = update.d
            X[k, omega] = update.x_row
            current = float(np.linalg.norm(Y - D @ X))
            assert current <= previous + 1e-10, f"atom {k}"
            previous = current


class TestLocalKsvd:
    def test_one_site_equals_centralized(self, small_sites: SyntheticSites) -> None:
        cfg = _config()
        [(D_local, trace_local)] = run_local_ksvd([small_sites.pooled], cfg)
        D_central, trace_central = run_ksvd(small_sites.pooled, cfg)
        assert trace_local.errors == trace_central.errors
        np.testing.assert_array_equal(D_local.atoms, D_central.atoms)

    def test_one_dictionary_per_site(self, small_sites: SyntheticSites) -> None:
        results = run_local_ksvd(small_sites.sites, _config(dict_iters=1))
        assert len(results) == 3


class TestOnlineKsvd:
    """FIFO buffer of the newest samples with warm starts."""

    def test_buffer_keeps_newest_samples(self, small_sites: SyntheticSites) -> None:
        batches = np.array_split(small_sites.pooled, 4, axis=1)
        periods = run_online_ksvd(batches, _config(dict_iters=1), buffer_limit=25)
        assert [p.arrived for p in periods] == [15, 30, 45, 60]
        assert [p.buffer_size for p in periods] == [15, 25, 25, 25]
        assert [p.period for p in periods] == [1, 2, 3, 4]

    def test_rejects_empty_buffer(self, small_sites: SyntheticSites) -> None:
        with pytest.raises(InvalidConfigError):
            run_online_ksvd([small_sites.pooled], _config(), buffer_limit=0)


class TestKsvdConfig:
    def test_zero_iterations_rejected(self) -> None:
        with pytest.raises(ValidationError):
            _config(dict_iters=0)

    def test_sparsity_above_atoms_rejected(self) -> None:
        with pytest.raises(ValidationError):
            _config(n_atoms=2, coding=CodingConfig(sparsity=3))
