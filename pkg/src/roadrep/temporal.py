"""Temporal branch: causal transformer over per-road hourly traffic sequences.

Each road yields two length-24 sequences (weekday and weekend visit
counts, log1p + z-scored). The encoder is trained with teacher-forced
next-value regression plus weekday/weekend classification of the final
state; the per-road representation concatenates both channels' final
states and projects down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import HOURS_PER_DAY, TrafficDynamics


@dataclass
class TemporalConfig:
    d_t: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    d_out: int = 32
    epochs: int = 20
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    lambda_reg: float = 10.0
    lambda_cls: float = 1.0
    causal: bool = True


@dataclass
class TrafficSequence:
    road_id: int
    channel: int               # 0 weekday, 1 weekend; doubles as the class label
    values: np.ndarray         # length-T transformed counts

    @property
    def label(self) -> int:
        return self.channel


def positional_encoding(length: int, d_t: int) -> np.ndarray:
    """Standard sinusoidal table, sin on even columns, cos on odd."""
    if d_t % 2:
        raise ValueError(f"d_t must be even, got {d_t}")
    pos = np.arange(length)[:, None]
    k = np.arange(d_t // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * k / d_t)
    table = np.zeros((length, d_t))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class TemporalModel:
    """Input projection + sinusoidal positions + pre-norm transformer blocks."""

    def __init__(self, seq_len: int, config: TemporalConfig, seed: int):
        if config.d_t % config.n_heads:
            raise ValueError(f"d_t={config.d_t} not divisible by n_heads={config.n_heads}")
        self.seq_len = seq_len
        self.config = config
        rng = np.random.default_rng(seed)
        d_t = config.d_t
        dh = d_t // config.n_heads

        self.pos = ad.Tensor(positional_encoding(seq_len, d_t))
        self.in_w = ad.parameter(ad.uniform_init(rng, (1, d_t), 1), "in.w")
        self.in_b = ad.parameter(np.zeros(d_t), "in.b")

        self.blocks = []
        for i in range(config.n_blocks):
            heads = []
            for h in range(config.n_heads):
                prefix = f"block.{i}.head.{h}"
                heads.append((
                    ad.parameter(ad.uniform_init(rng, (d_t, dh), d_t), f"{prefix}.wq"),
                    ad.parameter(ad.uniform_init(rng, (d_t, dh), d_t), f"{prefix}.wk"),
                    ad.parameter(ad.uniform_init(rng, (d_t, dh), d_t), f"{prefix}.wv"),
                ))
            block = {
                "ln1_g": ad.parameter(np.ones(d_t), f"block.{i}.ln1.g"),
                "ln1_b": ad.parameter(np.zeros(d_t), f"block.{i}.ln1.b"),
                "heads": heads,
                "wo": ad.parameter(ad.uniform_init(rng, (d_t, d_t), d_t), f"block.{i}.wo"),
                "bo": ad.parameter(np.zeros(d_t), f"block.{i}.bo"),
                "ln2_g": ad.parameter(np.ones(d_t), f"block.{i}.ln2.g"),
                "ln2_b": ad.parameter(np.zeros(d_t), f"block.{i}.ln2.b"),
                "w1": ad.parameter(ad.uniform_init(rng, (d_t, 4 * d_t), d_t), f"block.{i}.ffn.w1"),
                "b1": ad.parameter(np.zeros(4 * d_t), f"block.{i}.ffn.b1"),
                "w2": ad.parameter(ad.uniform_init(rng, (4 * d_t, d_t), 4 * d_t), f"block.{i}.ffn.w2"),
                "b2": ad.parameter(np.zeros(d_t), f"block.{i}.ffn.b2"),
            }
            self.blocks.append(block)

        self.reg_w = ad.parameter(ad.uniform_init(rng, (d_t, 1), d_t), "reg.w")
        self.reg_b = ad.parameter(np.zeros(1), "reg.b")
        self.cls_w = ad.parameter(ad.uniform_init(rng, (d_t, 2), d_t), "cls.w")
        self.cls_b = ad.parameter(np.zeros(2), "cls.b")
        self.out_w = ad.parameter(ad.uniform_init(rng, (2 * d_t, config.d_out), 2 * d_t), "out.w")
        self.out_b = ad.parameter(np.zeros(config.d_out), "out.b")

        t = seq_len
        self._blocked = np.triu(np.ones((t, t), dtype=bool), k=1) if config.causal \
            else np.zeros((t, t), dtype=bool)

    def params(self) -> dict[str, ad.Tensor]:
        out = {"in.w": self.in_w, "in.b": self.in_b}
        for block in self.blocks:
            for key, val in block.items():
                if key == "heads":
                    for head in val:
                        for t in head:
                            out[t.name] = t
                else:
                    out[val.name] = val
        for t in (self.reg_w, self.reg_b, self.cls_w, self.cls_b, self.out_w, self.out_b):
            out[t.name] = t
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.values for name, t in self.params().items()}

    def load_state(self, state):
        for name, tensor in self.params().items():
            if name in state:
                tensor.values = np.array(state[name], dtype=np.float64)

    def encode(self, values, collect_states=None, collect_attention=None):
        """Run the encoder; returns (hidden T x d_t, final 1 x d_t)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.seq_len,):
            raise ValueError(f"sequence length {values.shape} != ({self.seq_len},)")
        scale = 1.0 / np.sqrt(self.config.d_t // self.config.n_heads)
        x = ad.add(ad.add(ad.matmul(ad.Tensor(values[:, None]), self.in_w), self.in_b), self.pos)
        for block in self.blocks:
            h = ad.layer_norm(x, block["ln1_g"], block["ln1_b"])
            outs = []
            for wq, wk, wv in block["heads"]:
                q = ad.matmul(h, wq)
                k = ad.matmul(h, wk)
                v = ad.matmul(h, wv)
                scores = ad.scale(ad.matmul(q, ad.transpose(k)), scale)
                att = ad.softmax(ad.masked_fill(scores, self._blocked, -1e30), axis=1)
                if collect_attention is not None:
                    collect_attention.append(att.values)
                outs.append(ad.matmul(att, v))
            x = ad.add(x, ad.add(ad.matmul(ad.concat(outs, axis=-1), block["wo"]), block["bo"]))
            h2 = ad.layer_norm(x, block["ln2_g"], block["ln2_b"])
            ffn = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(h2, block["w1"]), block["b1"])),
                                   block["w2"]), block["b2"])
            x = ad.add(x, ffn)
            if collect_states is not None:
                collect_states.append(x.values.copy())
        final = ad.slice_(x, (slice(self.seq_len - 1, self.seq_len),))
        return x, final


def joint_loss(model: TemporalModel, batch: list[TrafficSequence],
               lambda_reg: float, lambda_cls: float):
    """Weighted sum of next-step regression and day-kind classification.

    Regression supervises every next position (teacher forcing) averaged
    over the batch; classification reads the final hidden state. Returns
    (loss tensor, metrics dict).
    """
    if not batch:
        raise ValueError("empty batch")
    if lambda_reg < 0 or lambda_cls < 0 or (lambda_reg == 0 and lambda_cls == 0):
        raise ValueError("loss weights must be non-negative and not both zero")
    t = model.seq_len
    preds, targets, finals, labels = [], [], [], []
    for seq in batch:
        hidden, final = model.encode(seq.values)
        preds.append(ad.add(ad.matmul(ad.slice_(hidden, (slice(0, t - 1),)), model.reg_w),
                            model.reg_b))
        targets.append(seq.values[1:, None])
        finals.append(final)
        labels.append(seq.label)
    reg = ad.mse_loss(ad.concat(preds, axis=0), ad.Tensor(np.concatenate(targets, axis=0)))
    logits = ad.add(ad.matmul(ad.concat(finals, axis=0), model.cls_w), model.cls_b)
    cls = ad.cross_entropy_loss(logits, np.asarray(labels))
    total = ad.add(ad.scale(reg, lambda_reg), ad.scale(cls, lambda_cls))
    acc = float((logits.values.argmax(axis=1) == np.asarray(labels)).mean())
    return total, {"loss_reg": float(reg.values), "loss_cls": float(cls.values), "acc": acc}


# ---------------------------------------------------------------------------
# sequences and training
# ---------------------------------------------------------------------------

def transform_stats(dynamics: TrafficDynamics) -> dict:
    """log1p + z-score statistics over every cell; std guarded at 1."""
    logged = np.log1p(dynamics.counts.astype(np.float64))
    std = float(logged.std())
    return {"mean": float(logged.mean()), "std": std if std > 0 else 1.0}


def build_sequences(dynamics: TrafficDynamics, stats: dict | None = None):
    """One sequence per (road, channel); returns (sequences, stats)."""
    stats = stats or transform_stats(dynamics)
    out = []
    for road in range(dynamics.n_roads):
        for channel in range(dynamics.counts.shape[2]):
            raw = np.log1p(dynamics.counts[road, :, channel].astype(np.float64))
            out.append(TrafficSequence(
                road_id=road, channel=channel,
                values=(raw - stats["mean"]) / stats["std"],
            ))
    return out, stats


def representations(model: TemporalModel, dynamics: TrafficDynamics, stats: dict) -> np.ndarray:
    """Per-road outputs: concat of the two channels' final states, projected."""
    sequences, _ = build_sequences(dynamics, stats)
    by_road: dict[int, dict[int, TrafficSequence]] = {}
    for seq in sequences:
        by_road.setdefault(seq.road_id, {})[seq.channel] = seq
    rows = []
    with ad.no_grad():
        for road in range(dynamics.n_roads):
            finals = [model.encode(by_road[road][c].values)[1] for c in (0, 1)]
            z = ad.add(ad.matmul(ad.concat(finals, axis=-1), model.out_w), model.out_b)
            rows.append(z.values[0])
    return np.array(rows)


def train_temporal(dynamics: TrafficDynamics, config: TemporalConfig, seed: int):
    """Seeded joint-task training; returns (z_d, model, history, stats).

    History rows are (step, loss_reg, loss_cls).
    """
    model = TemporalModel(HOURS_PER_DAY, config, seed)
    sequences, stats = build_sequences(dynamics)
    opt = ad.AdamW(model.params(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed + 1)
    history = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(sequences))
        for lo in range(0, len(order), config.batch):
            batch = [sequences[i] for i in order[lo:lo + config.batch]]
            loss, metrics = joint_loss(model, batch, config.lambda_reg, config.lambda_cls)
            if np.isnan(loss.values):
                raise ad.NumericalError(f"NaN temporal loss at step {step}")
            ad.backward(loss, params=opt.params.values())
            opt.step()
            opt.zero_grad()
            history.append((step, metrics["loss_reg"], metrics["loss_cls"]))
            step += 1
    z_d = representations(model, dynamics, stats)
    return z_d, model, history, stats


def classification_accuracy(model: TemporalModel, sequences: list[TrafficSequence]) -> float:
    """Day-kind accuracy of the final-state classifier over the given sequences."""
    correct = 0
    with ad.no_grad():
        for seq in sequences:
            _, final = model.encode(seq.values)
            logits = ad.add(ad.matmul(final, model.cls_w), model.cls_b)
            correct += int(logits.values.argmax()) == seq.label
    return correct / len(sequences)
