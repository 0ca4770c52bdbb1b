"""Transition matrix accumulation against a naive reference, normalization rules."""

import numpy as np
import pytest

from roadrep import autodiff as ad
from roadrep.mixhop import (
    accumulate_mixhop,
    apply_mixhop,
    build_mixhop,
    load_matrix,
    row_normalize,
    save_matrix,
)
from roadrep.network import Trajectory


def naive_accumulate(trajectories, n_roads):
    """O(sum m^2) reference: loop every ordered position pair."""
    raw = np.zeros((n_roads, n_roads), dtype=np.int64)
    for traj in trajectories:
        roads = traj.road_ids
        m = len(roads)
        for p in range(m):
            for q in range(p + 1, m):
                raw[roads[p], roads[q]] += m - (q - p)
    return raw


def _traj(roads):
    return Trajectory(list(roads), list(range(len(roads))))


class TestAccumulate:
    def test_three_road_chain(self):
        raw = accumulate_mixhop([_traj([1, 2, 3])], n_roads=4)
        expected = np.zeros((4, 4), dtype=np.int64)
        expected[1, 2] = 2
        expected[2, 3] = 2
        expected[1, 3] = 1
        np.testing.assert_array_equal(raw, expected)

    def test_length_one_is_zero(self):
        raw = accumulate_mixhop([_traj([0])], n_roads=2)
        assert (raw == 0).all()

    def test_revisit_accumulates(self):
        raw = accumulate_mixhop([_traj([0, 1, 0])], n_roads=2)
        assert raw[0, 1] == 2
        assert raw[1, 0] == 2
        assert raw[0, 0] == 1

    def test_matches_naive_reference_exactly(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(2, 21))
            trajs = [
                _traj(rng.integers(0, n, size=int(rng.integers(1, 13))).tolist())
                for _ in range(int(rng.integers(1, 5)))
            ]
            np.testing.assert_array_equal(
                accumulate_mixhop(trajs, n), naive_accumulate(trajs, n))

    def test_closer_hops_dominate(self):
        # within one trajectory of distinct roads, weight strictly decreases with hop distance
        roads = list(range(8))
        raw = accumulate_mixhop([_traj(roads)], n_roads=8)
        weights = [raw[0, d] for d in range(1, 8)]
        assert all(a > b for a, b in zip(weights, weights[1:]))

    def test_out_of_range_id(self):
        with pytest.raises(ValueError, match="out of range"):
            accumulate_mixhop([_traj([0, 5])], n_roads=3)


class TestRowNormalize:
    def test_simple_row(self):
        out = row_normalize(np.array([[2.0, 2.0, 1.0]] * 3))
        np.testing.assert_allclose(out[0], [0.4, 0.4, 0.2])

    def test_zero_row_becomes_identity_row(self):
        raw = np.zeros((3, 3))
        raw[0, 1] = 4.0
        out = row_normalize(raw)
        np.testing.assert_array_equal(out[1], [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(out[2], [0.0, 0.0, 1.0])

    def test_idempotent_on_stochastic(self):
        rng = np.random.default_rng(0)
        m = rng.random((6, 6))
        once = row_normalize(m)
        np.testing.assert_allclose(row_normalize(once), once, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        raw = rng.integers(0, 5, size=(10, 10)).astype(float)
        raw[3] = 0.0
        out = row_normalize(raw)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_negative_entry_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            row_normalize(np.array([[1.0, -0.5]]))


class TestApplyMixhop:
    def test_identity_passthrough(self):
        z = np.arange(12.0).reshape(4, 3)
        out = apply_mixhop(ad.Tensor(np.eye(4)), ad.Tensor(z))
        np.testing.assert_array_equal(out.values, z)

    def test_row_selection(self):
        z = np.arange(12.0).reshape(4, 3)
        p = np.zeros((4, 4))
        p[0, 2] = 1.0
        out = apply_mixhop(ad.Tensor(p), ad.Tensor(z))
        np.testing.assert_array_equal(out.values[0], z[2])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        p = ad.Tensor(row_normalize(rng.random((4, 4))), requires_grad=True)
        z = ad.Tensor(rng.standard_normal((4, 3)))
        w = ad.Tensor(rng.standard_normal((4, 3)))
        err = ad.gradient_check(lambda: ad.sum_(ad.mul(apply_mixhop(p, z), w)), [p])
        assert err < 1e-4


class TestMatrixIO:
    def test_round_trip(self, tmp_path):
        m = build_mixhop([_traj([0, 1, 2, 1])], n_roads=3).normalized
        path = tmp_path / "m.bin"
        save_matrix(m, path)
        np.testing.assert_array_equal(load_matrix(path), m)
        assert path.read_bytes()[:4] == b"DSTP"
