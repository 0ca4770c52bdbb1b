"""Fusion modes, metric algebra, and downstream evaluation harness tests."""

import numpy as np
import pytest

from roadrep import autodiff as ad
from roadrep.evaluation import (
    HeadConfig,
    LinearHead,
    acc_at_1,
    derive_speed_labels,
    eval_destination,
    eval_speed_inference,
    eval_travel_time,
    mae,
    mrr,
    rank_of_truth,
    rmse,
)
from roadrep.fusion import FusedRepresentation, fuse, gated_forward, init_gate_params
from roadrep.network import Trajectory, generate_synthetic_city, simulate_trajectories


class TestFuse:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.zg = rng.standard_normal((10, 32))
        self.zh = rng.standard_normal((10, 32))
        self.zd = rng.standard_normal((10, 32))

    def test_concat_widths(self):
        fused = fuse(self.zg, self.zh, self.zd, mode="concat")
        assert fused.z.shape == (10, 96)
        assert set(fused.provenance) == {"graph", "hyper", "temporal"}

    def test_sum_identity(self):
        fused = fuse(self.zg, np.zeros_like(self.zh), np.zeros_like(self.zd), mode="sum")
        np.testing.assert_array_equal(fused.z, self.zg)

    def test_no_temporal_ablation(self):
        fused = fuse(self.zg, self.zh, None, mode="concat")
        assert fused.z.shape == (10, 64)
        assert set(fused.provenance) == {"graph", "hyper"}

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError, match="row counts"):
            fuse(self.zg, self.zh[:5], self.zd)

    def test_sum_width_mismatch(self):
        with pytest.raises(ValueError, match="equal widths"):
            fuse(self.zg, self.zh[:, :16], None, mode="sum")

    def test_gated_needs_targets(self):
        with pytest.raises(ValueError, match="fit_targets"):
            fuse(self.zg, self.zh, self.zd, mode="gated")

    def test_gated_shape_and_determinism(self):
        targets = self.zg[:, 0] * 2.0 + 1.0
        ids = np.arange(10)
        a = fuse(self.zg, self.zh, self.zd, mode="gated", fit_targets=targets, fit_ids=ids, seed=3)
        b = fuse(self.zg, self.zh, self.zd, mode="gated", fit_targets=targets, fit_ids=ids, seed=3)
        assert a.z.shape == (10, 32)
        np.testing.assert_array_equal(a.z, b.z)

    def test_gated_gradient_check(self):
        rng = np.random.default_rng(1)
        branches = [ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(3)]
        params = init_gate_params(3, 3, seed=0)
        target = ad.Tensor(rng.standard_normal((4, 3)))

        def f():
            return ad.mse_loss(gated_forward(branches, params), target)

        tensors = branches + [t for n, t in params.items() if n.startswith("gate.")]
        assert ad.gradient_check(f, tensors) < 1e-4


class TestMetrics:
    def test_truth_first(self):
        scores = np.array([[9.0, 1.0, 0.0], [5.0, 1.0, 0.2]])
        truths = [0, 0]
        assert acc_at_1(scores, truths) == 1.0
        assert mrr(scores, truths) == 1.0

    def test_truth_second(self):
        scores = np.array([[1.0, 9.0], [0.5, 3.0]])
        truths = [0, 0]
        assert acc_at_1(scores, truths) == 0.0
        assert mrr(scores, truths) == 0.5

    def test_tie_breaks_to_lower_index(self):
        scores = np.array([3.0, 3.0, 1.0])
        assert rank_of_truth(scores, 0) == 1
        assert rank_of_truth(scores, 1) == 2

    def test_uniform_random_mrr_matches_harmonic_expectation(self):
        n, trials = 100, 1000
        rng = np.random.default_rng(42)
        scores = rng.random((trials, n))
        truths = rng.integers(0, n, size=trials)
        expected = np.sum(1.0 / np.arange(1, n + 1)) / n
        assert mrr(scores, truths) == pytest.approx(expected, abs=0.01)

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            pred = rng.standard_normal(50)
            truth = rng.standard_normal(50)
            assert rmse(pred, truth) >= mae(pred, truth) - 1e-12

    def test_acc_never_exceeds_mrr(self):
        rng = np.random.default_rng(8)
        scores = rng.random((200, 20))
        truths = rng.integers(0, 20, size=200)
        assert acc_at_1(scores, truths) <= mrr(scores, truths)

    def test_scaling_identity_preserves_ranking(self):
        # (c Z) @ (W / c) == Z @ W, so the initial-forward ranking is unchanged
        rng = np.random.default_rng(9)
        z = rng.standard_normal((6, 4))
        w = rng.standard_normal((4, 6))
        np.testing.assert_array_equal((4.0 * z) @ (w / 4.0), z @ w)  # exact for powers of two
        scores, scaled = z @ w, (3.5 * z) @ (w / 3.5)
        for row_a, row_b in zip(scores, scaled):
            np.testing.assert_array_equal(np.argsort(-row_a, kind="stable"),
                                          np.argsort(-row_b, kind="stable"))


class TestSpeedInference:
    def test_one_hot_features_near_zero_mae(self):
        # representation directly encodes the speed bin
        speeds = [4.0, 8.0, 12.0, 16.0]
        n = 40
        z = np.zeros((n, 4))
        labels = {}
        for i in range(n):
            z[i, i % 4] = 1.0
            labels[i] = speeds[i % 4]
        report = eval_speed_inference(z, labels, seeds=[0])
        assert report.metrics["MAE"] < 0.1
        assert report.metrics["RMSE"] >= report.metrics["MAE"]

    def test_informative_beats_noise(self):
        rng = np.random.default_rng(3)
        n = 30
        labels = {i: float(5 + (i % 3) * 5) for i in range(n)}
        informative = np.zeros((n, 3))
        for i in range(n):
            informative[i, i % 3] = 1.0
        noise = rng.standard_normal((n, 3))
        good = eval_speed_inference(informative, labels, seeds=[0, 1])
        bad = eval_speed_inference(noise, labels, seeds=[0, 1])
        assert good.metrics["MAE"] < bad.metrics["MAE"]

    def test_too_few_roads(self):
        with pytest.raises(ValueError, match="labeled roads"):
            eval_speed_inference(np.zeros((5, 2)), {0: 1.0, 1: 2.0}, seeds=[0])

    def test_report_structure(self):
        n = 15
        z = np.random.default_rng(0).standard_normal((n, 4))
        labels = {i: float(i) for i in range(n)}
        report = eval_speed_inference(z, labels, seeds=[0, 1, 2])
        assert len(report.per_seed) == 3
        assert report.metrics["MAE"] == pytest.approx(
            np.mean([p["MAE"] for p in report.per_seed]))
        assert "MAE" in report.to_json() and report.csv_rows()


def _constant_duration_trajs(n_roads, count, length, duration, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        roads = rng.integers(0, n_roads, size=length).tolist()
        times = np.linspace(0, duration, length).astype(int).tolist()
        out.append(Trajectory(roads, times))
    return out


class TestTravelTime:
    def test_constant_duration_fits_bias(self):
        z = np.random.default_rng(0).standard_normal((20, 6))
        trajs = _constant_duration_trajs(20, 40, 12, duration=600, seed=1)
        cfg = HeadConfig(hidden=8, epochs=5, batch=8)
        report = eval_travel_time(z, trajs, seeds=[0], head_cfg=cfg)
        assert report.metrics["MAE"] < 0.05 * 600

    def test_predictions_nonnegative(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((15, 4))
        trajs = _constant_duration_trajs(15, 30, 10, duration=60, seed=3)
        cfg = HeadConfig(hidden=8, epochs=2, batch=8)
        report = eval_travel_time(z, trajs, seeds=[0], head_cfg=cfg)
        assert report.metrics["MAE"] >= 0.0
        assert report.metrics["RMSE"] >= report.metrics["MAE"] - 1e-9

    def test_shuffling_rows_hurts(self):
        # duration is the sum of per-road costs; row identity carries the signal
        rng = np.random.default_rng(4)
        n = 24
        cost = rng.uniform(20, 120, size=n)
        z = np.zeros((n, n))
        np.fill_diagonal(z, 1.0)
        trajs = []
        for _ in range(50):
            roads = rng.integers(0, n, size=12).tolist()
            duration = int(cost[roads].sum())
            times = np.linspace(0, duration, 12).astype(int).tolist()
            trajs.append(Trajectory(roads, times))
        cfg = HeadConfig(hidden=16, epochs=20, batch=8)
        good = eval_travel_time(z, trajs, seeds=[0], head_cfg=cfg)
        shuffled = z[np.random.default_rng(5).permutation(n)]
        bad = eval_travel_time(shuffled, trajs, seeds=[0], head_cfg=cfg)
        assert good.metrics["MAE"] < bad.metrics["MAE"]


class TestDestination:
    def test_learnable_final_road(self):
        # destination equals the last prefix road's successor in a fixed cycle
        n = 12
        rng = np.random.default_rng(6)
        z = np.eye(n)
        trajs = []
        for _ in range(60):
            roads = rng.integers(0, n, size=11).tolist()
            roads.append((roads[-1] + 1) % n)
            trajs.append(Trajectory(roads, list(range(12))))
        cfg = HeadConfig(hidden=16, epochs=20, batch=8)
        report = eval_destination(z, trajs, seeds=[0], head_cfg=cfg)
        assert report.metrics["ACC@1"] > 3.0 / n
        assert report.metrics["ACC@1"] <= report.metrics["MRR"] + 1e-12

    def test_split_disjoint_and_reproducible(self):
        from roadrep.evaluation import _split_70_30

        a_train, a_test = _split_70_30(50, seed=3)
        b_train, b_test = _split_70_30(50, seed=3)
        np.testing.assert_array_equal(a_train, b_train)
        np.testing.assert_array_equal(a_test, b_test)
        assert not set(a_train) & set(a_test)
        assert len(a_train) + len(a_test) == 50


class TestSpeedLabels:
    def test_derived_from_simulated_city(self):
        net = generate_synthetic_city(5, 5, 1, seed=0)
        trajs = simulate_trajectories(net, count=60, seed=1)
        labels = derive_speed_labels(net, trajs)
        assert len(labels) >= 10
        for road, speed in labels.items():
            assert 0.5 < speed < 40.0  # plausible urban speeds in m/s

    def test_untraversed_roads_excluded(self):
        net = generate_synthetic_city(3, 3, 0, seed=0)
        traj = Trajectory([0, 1], [0, 30])
        labels = derive_speed_labels(net, [traj])
        assert set(labels) == {0}
