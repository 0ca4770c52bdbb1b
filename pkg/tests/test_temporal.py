"""Temporal branch: positional table, causality, joint loss, training behavior."""

import numpy as np
import pytest

from roadrep import autodiff as ad
from roadrep.features import TrafficDynamics
from roadrep.temporal import (
    TemporalConfig,
    TemporalModel,
    TrafficSequence,
    build_sequences,
    classification_accuracy,
    joint_loss,
    positional_encoding,
    representations,
    train_temporal,
)


def _synthetic_dynamics(n_roads=40, weekday_peak=8, weekend_peak=14, seed=0):
    """Distinct weekday/weekend peak hours with mild noise."""
    rng = np.random.default_rng(seed)
    hours = np.arange(24)
    counts = np.zeros((n_roads, 24, 2), dtype=np.int64)
    for road in range(n_roads):
        base = rng.integers(20, 120)
        wd = base * np.exp(-0.5 * ((hours - weekday_peak) / 2.5) ** 2)
        we = base * np.exp(-0.5 * ((hours - weekend_peak) / 3.0) ** 2)
        counts[road, :, 0] = rng.poisson(wd + 1)
        counts[road, :, 1] = rng.poisson(we + 1)
    return TrafficDynamics(counts)


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        table = positional_encoding(24, 8)
        np.testing.assert_array_equal(table[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_bounded(self):
        table = positional_encoding(24, 16)
        assert (table >= -1).all() and (table <= 1).all()

    def test_rows_distinct(self):
        table = positional_encoding(24, 4)
        assert len({tuple(np.round(row, 12)) for row in table}) == 24

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            positional_encoding(24, 7)


class TestCausality:
    def test_future_perturbation_leaves_prefix_bit_identical(self):
        cfg = TemporalConfig(d_t=16, n_blocks=3, n_heads=2)
        model = TemporalModel(24, cfg, seed=0)
        rng = np.random.default_rng(1)
        values = rng.standard_normal(24)
        for t in (5, 12, 20):
            bumped = values.copy()
            bumped[t] += 3.0
            states_a, states_b = [], []
            with ad.no_grad():
                model.encode(values, collect_states=states_a)
                model.encode(bumped, collect_states=states_b)
            for depth, (a, b) in enumerate(zip(states_a, states_b)):
                np.testing.assert_array_equal(a[:t], b[:t], err_msg=f"block {depth}, t={t}")
                assert not np.array_equal(a[t:], b[t:])

    def test_bidirectional_mode_breaks_causality(self):
        cfg = TemporalConfig(d_t=16, n_blocks=1, n_heads=2, causal=False)
        model = TemporalModel(24, cfg, seed=0)
        rng = np.random.default_rng(2)
        values = rng.standard_normal(24)
        bumped = values.copy()
        bumped[20] += 3.0
        with ad.no_grad():
            a, _ = model.encode(values)
            b, _ = model.encode(bumped)
        assert not np.array_equal(a.values[:20], b.values[:20])

    def test_attention_rows_sum_to_one(self):
        cfg = TemporalConfig(d_t=16, n_blocks=2, n_heads=2)
        model = TemporalModel(24, cfg, seed=3)
        atts = []
        with ad.no_grad():
            model.encode(np.random.default_rng(0).standard_normal(24), collect_attention=atts)
        for att in atts:
            np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)
            assert (att[np.triu_indices(24, k=1)] == 0.0).all()

    def test_zero_sequence_finite_and_deterministic(self):
        cfg = TemporalConfig(d_t=16, n_blocks=2, n_heads=2)
        with ad.no_grad():
            a, _ = TemporalModel(24, cfg, seed=9).encode(np.zeros(24))
            b, _ = TemporalModel(24, cfg, seed=9).encode(np.zeros(24))
        assert np.isfinite(a.values).all()
        np.testing.assert_array_equal(a.values, b.values)

    def test_wrong_length_rejected(self):
        model = TemporalModel(24, TemporalConfig(d_t=8, n_heads=2), seed=0)
        with pytest.raises(ValueError, match="length"):
            model.encode(np.zeros(12))


class TestJointLoss:
    def _batch(self, rng, n=6):
        return [
            TrafficSequence(road_id=i, channel=i % 2, values=rng.standard_normal(24))
            for i in range(n)
        ]

    def test_cls_weight_zero_leaves_reg_only(self):
        rng = np.random.default_rng(4)
        model = TemporalModel(24, TemporalConfig(d_t=8, n_blocks=1, n_heads=2), seed=0)
        batch = self._batch(rng)
        total, metrics = joint_loss(model, batch, lambda_reg=3.0, lambda_cls=0.0)
        assert float(total.values) == pytest.approx(3.0 * metrics["loss_reg"], rel=1e-12)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(5)
        model = TemporalModel(24, TemporalConfig(d_t=8, n_blocks=1, n_heads=2), seed=0)
        batch = self._batch(rng)
        t1, m = joint_loss(model, batch, 2.0, 5.0)
        assert float(t1.values) == pytest.approx(2.0 * m["loss_reg"] + 5.0 * m["loss_cls"], rel=1e-12)

    def test_uniform_classifier_near_ln2(self):
        rng = np.random.default_rng(6)
        model = TemporalModel(24, TemporalConfig(d_t=8, n_blocks=1, n_heads=2), seed=0)
        model.cls_w.values[:] = 0.0  # force exactly uniform class logits
        model.cls_b.values[:] = 0.0
        batch = self._batch(rng, n=8)  # balanced labels
        _, metrics = joint_loss(model, batch, 1.0, 1.0)
        assert metrics["loss_cls"] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_empty_batch(self):
        model = TemporalModel(24, TemporalConfig(d_t=8, n_heads=2), seed=0)
        with pytest.raises(ValueError, match="empty"):
            joint_loss(model, [], 1.0, 1.0)

    def test_reg_nonnegative(self):
        rng = np.random.default_rng(7)
        model = TemporalModel(24, TemporalConfig(d_t=8, n_blocks=1, n_heads=2), seed=1)
        _, metrics = joint_loss(model, self._batch(rng), 1.0, 1.0)
        assert metrics["loss_reg"] >= 0.0

    def test_full_stack_gradient_check(self):
        # tiny configuration: T=6, d_t=8, one block
        cfg = TemporalConfig(d_t=8, n_blocks=1, n_heads=2)
        model = TemporalModel(6, cfg, seed=2)
        rng = np.random.default_rng(8)
        batch = [TrafficSequence(0, 0, rng.standard_normal(6)),
                 TrafficSequence(1, 1, rng.standard_normal(6))]
        tensors = list(model.params().values())

        def f():
            return joint_loss(model, batch, 1.0, 1.0)[0]

        assert ad.gradient_check(f, tensors) < 1e-4


class TestTrainTemporal:
    def test_separable_peaks_classified(self):
        dynamics = _synthetic_dynamics(n_roads=40, seed=0)
        cfg = TemporalConfig(d_t=16, n_blocks=1, n_heads=2, epochs=30, batch=16, d_out=8)
        z_d, model, history, stats = train_temporal(dynamics, cfg, seed=0)
        sequences, _ = build_sequences(dynamics, stats)
        assert classification_accuracy(model, sequences) >= 0.9
        assert z_d.shape == (40, 8)
        # teacher-forced regression improves substantially
        first = history[0][1]
        last = np.mean([h[1] for h in history[-5:]])
        assert last < first / 2

    def test_identical_roads_identical_rows(self):
        counts = np.zeros((4, 24, 2), dtype=np.int64)
        counts[:, 8, 0] = 50
        counts[:, 14, 1] = 30
        dynamics = TrafficDynamics(counts)
        cfg = TemporalConfig(d_t=8, n_blocks=1, n_heads=2, epochs=1, batch=4, d_out=6)
        z_d, _, _, _ = train_temporal(dynamics, cfg, seed=1)
        np.testing.assert_array_equal(z_d[0], z_d[1])
        np.testing.assert_array_equal(z_d[0], z_d[3])

    def test_deterministic_under_seed(self):
        dynamics = _synthetic_dynamics(n_roads=6, seed=2)
        cfg = TemporalConfig(d_t=8, n_blocks=1, n_heads=2, epochs=2, batch=4, d_out=4)
        a, _, _, _ = train_temporal(dynamics, cfg, seed=5)
        b, _, _, _ = train_temporal(dynamics, cfg, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_label_shuffled_training_near_chance(self):
        dynamics = _synthetic_dynamics(n_roads=240, seed=3)
        sequences, stats = build_sequences(dynamics)
        rng = np.random.default_rng(9)
        shuffled = [
            TrafficSequence(s.road_id, int(rng.integers(0, 2)), s.values) for s in sequences
        ]
        rng.shuffle(shuffled)
        train, held = shuffled[:336], shuffled[336:]
        cfg = TemporalConfig(d_t=8, n_blocks=1, n_heads=2, epochs=3, batch=16)
        model = TemporalModel(24, cfg, seed=4)
        opt = ad.AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        for _ in range(cfg.epochs):
            for lo in range(0, len(train), cfg.batch):
                loss, _ = joint_loss(model, train[lo:lo + cfg.batch], 1.0, 1.0)
                ad.backward(loss, params=opt.params.values())
                opt.step()
                opt.zero_grad()
        acc = classification_accuracy(model, held)
        assert 0.45 <= acc <= 0.55

    def test_checkpoint_round_trip(self, tmp_path):
        dynamics = _synthetic_dynamics(n_roads=5, seed=4)
        cfg = TemporalConfig(d_t=8, n_blocks=1, n_heads=2, epochs=1, batch=4, d_out=4)
        z_d, model, _, stats = train_temporal(dynamics, cfg, seed=2)
        path = tmp_path / "temporal.ckpt"
        ad.save_checkpoint(path, model.state())
        fresh = TemporalModel(24, cfg, seed=77)
        fresh.load_state(ad.load_checkpoint(path))
        np.testing.assert_array_equal(representations(fresh, dynamics, stats), z_d)
