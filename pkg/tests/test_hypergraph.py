"""Hyperedge construction, spectral clustering, and propagation operator tests."""

import itertools

import numpy as np
import pytest

from roadrep.hypergraph import (
    KIND_SAME_TYPE,
    KIND_SINGLETON,
    Hypergraph,
    build_hyperedges_functional,
    build_hyperedges_oneway_adjacent,
    build_hyperedges_same_type,
    build_hypergraph,
    jacobi_eigh,
    kmeans,
    load_hypergraph,
    propagation_matrix,
    save_hypergraph,
    spectral_zones,
)
from roadrep.network import RoadRecord, generate_synthetic_city


def _stub_network(types=None, oneway=None, centroids=None, adjacency=None):
    import scipy.sparse as sp

    from roadrep.network import RoadNetwork

    n = len(types or oneway or centroids)
    types = types or ["residential"] * n
    oneway = oneway or [False] * n
    centroids = centroids or [(39.9, 116.3)] * n
    roads = []
    for i in range(n):
        lat, lon = centroids[i]
        roads.append(RoadRecord(id=i, start_lon=lon, start_lat=lat,
                                end_lon=lon + 1e-3, end_lat=lat,
                                road_type=types[i], length=100.0, lanes=1,
                                oneway=oneway[i]))
    adj = sp.csr_matrix(adjacency if adjacency is not None else np.zeros((n, n)))
    return RoadNetwork(roads=roads, edges=[], adjacency=adj,
                       orig_ids=list(range(n)), id_map={i: i for i in range(n)})


class TestJacobi:
    def test_matches_numpy_eigh(self):
        rng = np.random.default_rng(0)
        for n in (3, 6, 12):
            m = rng.standard_normal((n, n))
            m = (m + m.T) / 2
            vals, vecs = jacobi_eigh(m)
            ref = np.linalg.eigvalsh(m)
            np.testing.assert_allclose(vals, ref, atol=1e-8)
            np.testing.assert_allclose(m @ vecs, vecs * vals, atol=1e-8)

    def test_non_symmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            jacobi_eigh(np.array([[0.0, 1.0], [2.0, 0.0]]))


class TestKMeans:
    def test_separated_blobs(self):
        rng = np.random.default_rng(1)
        pts = np.vstack([rng.normal(0, 0.05, (10, 2)), rng.normal(5, 0.05, (12, 2))])
        labels = kmeans(pts, 2, seed=3)
        assert len(set(labels[:10])) == 1
        assert len(set(labels[10:])) == 1
        assert labels[0] != labels[-1]

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        pts = rng.random((30, 3))
        np.testing.assert_array_equal(kmeans(pts, 4, seed=9), kmeans(pts, 4, seed=9))

    def test_k_exceeds_points(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 2)), 3, seed=0)


def _two_cliques(k=5):
    n = 2 * k
    a = np.zeros((n, n))
    for block in (range(k), range(k, n)):
        for i, j in itertools.combinations(block, 2):
            a[i, j] = a[j, i] = 1.0
    return a


def best_two_partition_by_cut(a):
    """Brute-force bipartition with minimum cut (both sides non-empty)."""
    n = a.shape[0]
    best, best_cut = None, np.inf
    for bits in range(1, 2 ** (n - 1)):  # fix node 0 on side 0
        side = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        if side.all() or not side.any():
            continue
        cut = a[np.ix_(side, ~side)].sum()
        if cut < best_cut:
            best, best_cut = side, cut
    return best, best_cut


class TestSpectralZones:
    def test_recovers_two_cliques_exactly(self):
        a = _two_cliques(5)
        labels = spectral_zones(a, 2, seed=0)
        assert len(set(labels[:5])) == 1 and len(set(labels[5:])) == 1
        assert labels[0] != labels[9]
        # agree with the brute-force minimum-cut bipartition
        side, cut = best_two_partition_by_cut(a)
        assert cut == 0.0
        assert (labels[side] != labels[0]).all() or (labels[side] == labels[0]).all()

    def test_same_seed_identical(self):
        net = generate_synthetic_city(5, 5, 0, seed=0)
        a = build_hyperedges_functional(net, 4, seed=7)
        b = build_hyperedges_functional(net, 4, seed=7)
        assert a == b

    def test_k_zones_one_covers_all(self):
        net = generate_synthetic_city(3, 3, 0, seed=0)
        edges = build_hyperedges_functional(net, 1, seed=0)
        assert edges == [list(range(net.n_roads))]

    def test_k_exceeds_n(self):
        with pytest.raises(ValueError):
            spectral_zones(np.zeros((3, 3)), 5, seed=0)


class TestSameType:
    def test_partition_by_type(self):
        net = _stub_network(types=["a", "b", "c", "a", "b"])
        edges = build_hyperedges_same_type(net)
        assert sorted(map(tuple, edges)) == [(0, 3), (1, 4), (2,)]

    def test_single_type(self):
        net = _stub_network(types=["x"] * 4)
        assert build_hyperedges_same_type(net) == [[0, 1, 2, 3]]

    def test_distant_same_type_share_edge(self):
        net = _stub_network(types=["trunk", "residential", "trunk"],
                            centroids=[(39.0, 116.0), (39.5, 116.5), (41.0, 118.0)])
        edges = build_hyperedges_same_type(net)
        assert [0, 2] in edges


class TestOnewayAdjacent:
    def test_no_oneway_roads(self):
        net = _stub_network(types=["a"] * 3)
        assert build_hyperedges_oneway_adjacent(net) == []

    def test_close_pair_far_singleton(self):
        # two roads ~55 m apart, third ~10 km away
        net = _stub_network(
            oneway=[True, True, True],
            centroids=[(39.9000, 116.3000), (39.9005, 116.3000), (39.99, 116.30)])
        edges = build_hyperedges_oneway_adjacent(net, radius_m=200.0)
        assert edges == [[0, 1]]

    def test_all_pairs_beyond_radius(self):
        net = _stub_network(
            oneway=[True, True],
            centroids=[(39.0, 116.0), (40.0, 117.0)])
        assert build_hyperedges_oneway_adjacent(net, radius_m=200.0) == []


class TestBuildHypergraph:
    def test_invariants_on_synthetic_city(self):
        net = generate_synthetic_city(6, 6, 1, seed=1)
        hg = build_hypergraph(net, k_zones=4, seed=0)
        assert (hg.incidence.sum(axis=0) >= 1).all()          # no empty hyperedge
        assert (hg.node_degrees() >= 1).all()                 # full coverage
        same = hg.incidence[:, [k for k, kind in enumerate(hg.kinds) if kind == KIND_SAME_TYPE]]
        np.testing.assert_array_equal(same.sum(axis=1), 1.0)  # same-type edges partition roads

    def test_without_same_type_falls_back_to_singletons(self):
        net = _stub_network(types=["a", "b", "c"])  # no adjacency, no oneway roads
        hg = build_hypergraph(net, use_functional=False, use_same_type=False, use_oneway=False)
        assert all(kind == KIND_SINGLETON for kind in hg.kinds)
        assert (hg.node_degrees() == 1).all()

    def test_no_hg2_excludes_same_type_and_stays_covered(self):
        net = generate_synthetic_city(4, 4, 0, seed=0)
        hg = build_hypergraph(net, k_zones=3, seed=0, use_same_type=False)
        assert KIND_SAME_TYPE not in hg.kinds
        assert (hg.node_degrees() >= 1).all()

    def test_json_round_trip(self, tmp_path):
        net = generate_synthetic_city(4, 4, 1, seed=2)
        hg = build_hypergraph(net, k_zones=3, seed=1)
        path = tmp_path / "hg.jsonl"
        save_hypergraph(hg, path)
        loaded = load_hypergraph(path, net.n_roads)
        np.testing.assert_array_equal(loaded.incidence, hg.incidence)
        assert loaded.kinds == hg.kinds


class TestPropagation:
    def test_single_hyperedge_means(self):
        n = 5
        hg = Hypergraph(incidence=np.ones((n, 1)), kinds=["functional_zone"])
        p = propagation_matrix(hg)
        rng = np.random.default_rng(0)
        z = rng.standard_normal((n, 3))
        np.testing.assert_allclose(p @ z, np.tile(z.mean(axis=0), (n, 1)), atol=1e-12)

    def test_pair_edge_averages_members(self):
        incidence = np.zeros((4, 3))
        incidence[[0, 1], 0] = 1.0   # pair edge containing nodes 0 and 1
        incidence[2, 1] = 1.0
        incidence[3, 2] = 1.0
        hg = Hypergraph(incidence=incidence, kinds=["a", "b", "c"])
        p = propagation_matrix(hg)
        z = np.arange(8.0).reshape(4, 2)
        np.testing.assert_allclose((p @ z)[0], (z[0] + z[1]) / 2)

    def test_row_stochastic(self):
        net = generate_synthetic_city(5, 5, 1, seed=3)
        hg = build_hypergraph(net, k_zones=4, seed=0)
        p = propagation_matrix(hg)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_repeated_application_converges_to_consensus(self):
        n = 6
        hg = Hypergraph(incidence=np.ones((n, 1)), kinds=["x"])
        p = propagation_matrix(hg)
        rng = np.random.default_rng(1)
        z = rng.standard_normal((n, 2))
        out = np.linalg.matrix_power(p, 10) @ z
        assert np.ptp(out, axis=0).max() < 1e-12

    def test_raw_degrees_literal_product(self):
        incidence = np.zeros((3, 2))
        incidence[[0, 1], 0] = 1.0
        incidence[[1, 2], 1] = 1.0
        hg = Hypergraph(incidence=incidence, kinds=["a", "b"])
        dn = np.diag(hg.node_degrees())
        de = np.diag(hg.edge_degrees())
        expected = dn @ incidence @ de @ incidence.T
        np.testing.assert_array_equal(propagation_matrix(hg, raw_degrees=True), expected)

    def test_empty_hyperedge_rejected(self):
        with pytest.raises(ValueError, match="empty hyperedge"):
            Hypergraph(incidence=np.zeros((3, 1)), kinds=["a"])
