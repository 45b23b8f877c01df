"""Tests for the distributed power method and cloud K-SVD."""

import numpy as np
import pytest

from app.exceptions import InvalidConfigError, PowerCollapseError
from app.schemas.config import CloudConfig, CodingConfig
from app.services.cloud_ksvd import cloud_ksvd_run, distributed_power_method, matched_ksvd_config
from app.services.dictionary_learning import Dictionary, run_ksvd
from app.services.linalg import power_method, unit
from app.services.network import Topology, WeightMatrix, local_degree_weights
from app.services.site_pool import ThreadedSitePool
from app.services.synthetic import SyntheticSites


def _cloud_config(**overrides: object) -> CloudConfig:
    values: dict[str, object] = {
        "n_atoms": 12,
        "dict_iters": 3,
        "power_iters": 5,
        "consensus_iters": 10,
        "seed": 5,
        "coding": CodingConfig(sparsity=2),
    }
    values.update(overrides)
    return CloudConfig.model_validate(values)


@pytest.fixture
def path_weights() -> WeightMatrix:
    return local_degree_weights(Topology.from_edges(3, [(0, 1), (1, 2)]))


def _psd_parts(rng: np.random.Generator, n_parts: int, n: int) -> list[np.ndarray]:
    parts = []
    for _ in range(n_parts):
        A = rng.standard_normal((n, n + 2))
        parts.append(A @ A.T)
    return parts


class TestDistributedPowerMethod:
    """Power iterations whose products are summed by consensus."""

    def test_complete_graph_matches_centralized(self, rng: np.random.Generator) -> None:
        M = _psd_parts(rng, 1, 5)[0]
        W = local_degree_weights(Topology.complete(4))
        q_init = unit(rng.standard_normal(5))
        run = distributed_power_method([M] * 4, W, 6, 1, q_init)
        expected = power_method(4.0 * M, q_init, 6)
        for i in range(4):
            np.testing.assert_allclose(run.estimates[i], expected, atol=1e-12)

    def test_many_rounds_approach_centralized(
        self, rng: np.random.Generator, ring_weights: WeightMatrix
    ) -> None:
        parts = _psd_parts(rng, 4, 5)
        q_init = unit(rng.standard_normal(5))
        run = distributed_power_method(parts, ring_weights, 5, 80, q_init)
        expected = power_method(sum(parts), q_init, 5)
        np.testing.assert_allclose(run.estimates, np.tile(expected, (4, 1)), atol=1e-8)

    def test_message_count(self, rng: np.random.Generator, ring_weights: WeightMatrix) -> None:
        parts = _psd_parts(rng, 4, 3)
        run = distributed_power_method(parts, ring_weights, 3, 7, unit(np.ones(3)))
        assert run.messages == 3 * 7 * 2 * 4

    def test_history_has_one_entry_per_step(
        self, rng: np.random.Generator, ring_weights: WeightMatrix
    ) -> None:
        parts = _psd_parts(rng, 4, 3)
        run = distributed_power_method(
            parts, ring_weights, 4, 2, unit(np.ones(3)), record_history=True
        )
        assert len(run.history) == 4
        np.testing.assert_array_equal(run.history[-1], run.estimates)

    def test_zero_parts_collapse(self, ring_weights: WeightMatrix) -> None:
        parts = [np.zeros((3, 3))] * 4
        with pytest.raises(PowerCollapseError) as info:
            distributed_power_method(parts, ring_weights, 3, 2, unit(np.ones(3)))
        assert info.value.iteration == 1
        assert info.value.sites == [0, 1, 2, 3]

    def test_site_out_of_reach_keeps_its_iterate(self, path_weights: WeightMatrix) -> None:
        e2 = np.array([0.0, 1.0, 0.0, 0.0])
        parts = [np.outer(e2, e2), np.zeros((4, 4)), np.zeros((4, 4))]
        q_init = unit(np.array([1.0, 2.0, -1.0, 0.5]))
        run = distributed_power_method(parts, path_weights, 4, 1, q_init)
        assert run.stalled == [2]
        np.testing.assert_array_equal(run.estimates[2], q_init)
        for i in (0, 1):
            assert abs(run.estimates[i] @ e2) == pytest.approx(1.0, abs=1e-12)

    def test_part_count_must_match_sites(self, ring_weights: WeightMatrix) -> None:
        with pytest.raises(InvalidConfigError):
            distributed_power_method([np.eye(3)] * 3, ring_weights, 1, 1, unit(np.ones(3)))


class TestCloudKsvd:
    """Collaborative K-SVD over a simulated network."""

    def test_one_site_is_bitwise_budget_matched_ksvd(
        self, small_sites: SyntheticSites, single_site: WeightMatrix
    ) -> None:
        cfg = _cloud_config(consensus_iters=1)
        Y = small_sites.pooled
        [D_cloud], cloud_trace = cloud_ksvd_run([Y], single_site, cfg)
        D_central, central_trace = run_ksvd(Y, matched_ksvd_config(cfg))
        assert cloud_trace.errors == central_trace.errors
        np.testing.assert_array_equal(D_cloud.atoms, D_central.atoms)

    def test_sites_agree_with_enough_consensus(
        self, small_sites: SyntheticSites, path_weights: WeightMatrix
    ) -> None:
        cfg = _cloud_config(dict_iters=1, consensus_iters=60)
        dictionaries, _ = cloud_ksvd_run(small_sites.sites, path_weights, cfg)
        for D in dictionaries[1:]:
            np.testing.assert_allclose(D.atoms, dictionaries[0].atoms, atol=1e-6)

    def test_trace_shape_and_unit_atoms(
        self, small_sites: SyntheticSites, path_weights: WeightMatrix
    ) -> None:
        cfg = _cloud_config(record_dictionaries=True)
        dictionaries, trace = cloud_ksvd_run(small_sites.sites, path_weights, cfg)
        assert len(dictionaries) == 3
        for D in dictionaries:
            np.testing.assert_allclose(np.linalg.norm(D.atoms, axis=0), 1.0, atol=1e-10)
        assert len(trace.atoms) == 3 * 12
        assert len(trace.errors) == 3
        assert trace.atom(2, 4).iteration == 2
        assert trace.atom(2, 4).atom == 4
        assert trace.iterations[0].dictionaries is not None
        assert trace.iterations[0].dictionaries.shape == (3, 8, 12)
        assert trace.site_sizes == (20, 20, 20)

    def test_messages_per_atom(
        self, small_sites: SyntheticSites, path_weights: WeightMatrix
    ) -> None:
        cfg = _cloud_config(dict_iters=1, power_iters=4, consensus_iters=3)
        _, trace = cloud_ksvd_run(small_sites.sites, path_weights, cfg)
        for record in trace.atoms:
            if not record.reinitialized:
                assert record.messages == 4 * 3 * 2 * 2

    def test_thread_pool_gives_same_result(
        self, small_sites: SyntheticSites, path_weights: WeightMatrix
    ) -> None:
        cfg = _cloud_config(dict_iters=2)
        serial, serial_trace = cloud_ksvd_run(small_sites.sites, path_weights, cfg)
        threaded, threaded_trace = cloud_ksvd_run(
            small_sites.sites, path_weights, cfg, pool=ThreadedSitePool(3)
        )
        assert serial_trace.errors == threaded_trace.errors
        for a, b in zip(serial, threaded, strict=True):
            np.testing.assert_array_equal(a.atoms, b.atoms)

    def test_site_count_must_match_network(
        self, small_sites: SyntheticSites, ring_weights: WeightMatrix
    ) -> None:
        with pytest.raises(InvalidConfigError):
            cloud_ksvd_run(small_sites.sites, ring_weights, _cloud_config())

    def test_non_unit_reference_rejected(self) -> None:
        with pytest.raises(ValueError, match="unit norm"):
            _cloud_config(d_ref=(1.0, 1.0))

    def test_atom_used_at_one_site_survives_short_consensus(
        self, path_weights: WeightMatrix
    ) -> None:
        eye = np.eye(4)
        sites = [eye[:, [0, 1]], eye[:, [0]], eye[:, [0]]]
        initial = Dictionary(eye[:, [0, 1]].copy())
        cfg = _cloud_config(
            n_atoms=2, dict_iters=1, power_iters=3, consensus_iters=1,
            coding=CodingConfig(sparsity=1),
        )  # fmt: skip
        dictionaries, trace = cloud_ksvd_run(sites, path_weights, cfg, initial=initial)

        record = trace.atom(1, 1)
        np.testing.assert_array_equal(record.support_sizes, [1, 0, 0])
        assert not record.reinitialized
        assert record.stalled == [2]
        assert abs(dictionaries[0].atoms[:, 1] @ eye[:, 1]) == pytest.approx(1.0, abs=1e-12)
        assert trace.iterations[0].site_errors[0] == pytest.approx(0.0, abs=1e-12)
