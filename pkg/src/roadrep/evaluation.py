"""Downstream task harness: speed inference, travel time, destination prediction.

Representations stay frozen; each task trains a small head per seed
(linear regression for per-road speed, a gated recurrent sequence head
for the trajectory tasks) and reports MAE/RMSE or ACC@1/MRR with
per-seed values and their mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

RECURRENT_HEAD = "single-layer GRU + linear readout"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mae(pred, truth) -> float:
    return float(np.abs(np.asarray(pred) - np.asarray(truth)).mean())


def rmse(pred, truth) -> float:
    return float(np.sqrt(((np.asarray(pred) - np.asarray(truth)) ** 2).mean()))


def rank_of_truth(scores: np.ndarray, truth: int) -> int:
    """1-based rank under descending score; ties go to the lower index."""
    order = np.argsort(-scores, kind="stable")
    return int(np.flatnonzero(order == truth)[0]) + 1


def acc_at_1(score_rows: np.ndarray, truths) -> float:
    return float(np.mean([rank_of_truth(s, t) == 1 for s, t in zip(score_rows, truths)]))


def mrr(score_rows: np.ndarray, truths) -> float:
    return float(np.mean([1.0 / rank_of_truth(s, t) for s, t in zip(score_rows, truths)]))


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    per_seed: list[dict[str, float]]
    seeds: list[int]
    split: str
    head: str
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "metrics": self.metrics,
            "per_seed": self.per_seed,
            "seeds": self.seeds,
            "split": self.split,
            "head": self.head,
            "config_hash": self.config_hash,
        }
        if self.extra:
            out["extra"] = self.extra
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self) -> list[str]:
        return [f"{self.task},{name},{value}" for name, value in sorted(self.metrics.items())]


def _summarize(task, per_seed, seeds, split, head, config_hash="", extra=None) -> EvalReport:
    names = sorted(per_seed[0])
    means = {n: float(np.mean([p[n] for p in per_seed])) for n in names}
    return EvalReport(task=task, metrics=means, per_seed=per_seed, seeds=list(seeds),
                      split=split, head=head, config_hash=config_hash, extra=extra or {})


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

@dataclass
class HeadConfig:
    hidden: int = 32
    epochs: int = 30
    batch: int = 16
    lr: float = 1e-2
    weight_decay: float = 0.0
    patience: int = 5
    min_epochs: int = 8


class LinearHead:
    """Single linear layer; targets are standardized internally over the fit set."""

    def __init__(self, d: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w = ad.parameter(ad.uniform_init(rng, (d, 1), d), "w")
        self.b = ad.parameter(np.zeros(1), "b")
        self.mu = 0.0
        self.sig = 1.0

    def fit(self, x: np.ndarray, y: np.ndarray, steps: int = 400, lr: float = 1e-2):
        self.mu = float(np.mean(y))
        self.sig = max(float(np.std(y)), 1e-9)
        opt = ad.AdamW({"w": self.w, "b": self.b}, lr=lr, weight_decay=0.0)
        xt = ad.Tensor(x)
        yt = ad.Tensor(((y - self.mu) / self.sig)[:, None])
        for _ in range(steps):
            loss = ad.mse_loss(ad.add(ad.matmul(xt, self.w), self.b), yt)
            ad.backward(loss, params=opt.params.values())
            opt.step()
            opt.zero_grad()
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            raw = (ad.add(ad.matmul(ad.Tensor(x), self.w), self.b)).values[:, 0]
        return raw * self.sig + self.mu


class RecurrentHead:
    """Single-layer GRU over frozen embedding rows, linear readout.

    Batches run back-padded with a freeze mask: once a sequence ends its
    hidden row stops updating, so the state at the last step is each
    sequence's own final state.
    """

    def __init__(self, d: int, hidden: int, n_out: int, seed: int):
        rng = np.random.default_rng(seed)
        self.hidden = hidden

        def lin(rows, cols, fan, name):
            return ad.parameter(ad.uniform_init(rng, (rows, cols), fan), name)

        self.p = {
            "wz": lin(d, hidden, d, "wz"), "uz": lin(hidden, hidden, hidden, "uz"),
            "bz": ad.parameter(np.zeros(hidden), "bz"),
            "wr": lin(d, hidden, d, "wr"), "ur": lin(hidden, hidden, hidden, "ur"),
            "br": ad.parameter(np.zeros(hidden), "br"),
            "wh": lin(d, hidden, d, "wh"), "uh": lin(hidden, hidden, hidden, "uh"),
            "bh": ad.parameter(np.zeros(hidden), "bh"),
            "wo": lin(hidden, n_out, hidden, "wo"),
            "bo": ad.parameter(np.zeros(n_out), "bo"),
        }

    def params(self):
        return self.p

    def _step(self, x: ad.Tensor, h: ad.Tensor, batch: int) -> ad.Tensor:
        p = self.p
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["wz"]), ad.matmul(h, p["uz"])), p["bz"]))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["wr"]), ad.matmul(h, p["ur"])), p["br"]))
        cand = ad.tanh(ad.add(ad.add(ad.matmul(x, p["wh"]),
                                     ad.matmul(ad.mul(r, h), p["uh"])), p["bh"]))
        ones = ad.Tensor(np.ones((batch, self.hidden)))
        return ad.add(ad.mul(ad.add(ones, ad.scale(z, -1.0)), h), ad.mul(z, cand))

    def forward_batch(self, z: np.ndarray, sequences: list[np.ndarray]) -> ad.Tensor:
        """Final-state outputs (B, n_out) for variable-length index sequences."""
        b = len(sequences)
        lengths = np.array([s.size for s in sequences])
        max_len = int(lengths.max())
        padded = np.zeros((b, max_len), dtype=np.int64)
        for i, seq in enumerate(sequences):
            padded[i, :seq.size] = seq
        z_const = ad.Tensor(z)
        h = ad.Tensor(np.zeros((b, self.hidden)))
        for t in range(max_len):
            x = ad.gather_rows(z_const, padded[:, t])
            h_new = self._step(x, h, b)
            active = (lengths > t).astype(np.float64)[:, None]
            if active.all():
                h = h_new
            else:
                keep = ad.Tensor(np.broadcast_to(active, (b, self.hidden)).copy())
                off = ad.Tensor(np.broadcast_to(1.0 - active, (b, self.hidden)).copy())
                h = ad.add(ad.mul(h_new, keep), ad.mul(h, off))
        return ad.add(ad.matmul(h, self.p["wo"]), self.p["bo"])

    def forward(self, rows: np.ndarray) -> ad.Tensor:
        """Single sequence of embedding rows (L, d) -> (1, n_out)."""
        return self.forward_batch(rows, [np.arange(rows.shape[0])])


def _train_recurrent(head: RecurrentHead, z: np.ndarray, sequences, targets, task: str,
                     cfg: HeadConfig, seed: int):
    """Mini-batch training with early stopping on a 10% validation slice."""
    rng = np.random.default_rng(seed)
    n = len(sequences)
    order = rng.permutation(n)
    n_val = max(1, n // 10)
    val_idx, train_idx = order[:n_val], order[n_val:]
    opt = ad.AdamW(head.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    def batch_loss(indices):
        stacked = head.forward_batch(z, [sequences[i] for i in indices])
        if task == "regression":
            y = ad.Tensor(np.array([[targets[i]] for i in indices], dtype=np.float64))
            return ad.mse_loss(stacked, y)
        return ad.cross_entropy_loss(stacked, np.array([targets[i] for i in indices]))

    best, patience_left = np.inf, cfg.patience
    for epoch in range(cfg.epochs):
        epoch_order = rng.permutation(train_idx)
        for lo in range(0, epoch_order.size, cfg.batch):
            idx = epoch_order[lo:lo + cfg.batch]
            loss = batch_loss(idx)
            if np.isnan(loss.values):
                raise ad.NumericalError("NaN head loss")
            ad.backward(loss, params=opt.params.values())
            opt.step()
            opt.zero_grad()
        with ad.no_grad():
            val = float(batch_loss(val_idx).values)
        if val < best - 1e-9:
            best, patience_left = val, cfg.patience
        elif epoch + 1 >= cfg.min_epochs:
            patience_left -= 1
            if patience_left <= 0:
                break
    return head


# ---------------------------------------------------------------------------
# synthetic labels
# ---------------------------------------------------------------------------

def derive_speed_labels(network, trajectories) -> dict[int, float]:
    """Per-road mean speed (m/s): length over mean entry-to-entry traversal time."""
    total = np.zeros(network.n_roads)
    visits = np.zeros(network.n_roads)
    for traj in trajectories:
        for k in range(len(traj.road_ids) - 1):
            dt = traj.timestamps[k + 1] - traj.timestamps[k]
            if dt > 0:
                total[traj.road_ids[k]] += dt
                visits[traj.road_ids[k]] += 1
    return {
        int(i): float(network.roads[i].length / (total[i] / visits[i]))
        for i in np.flatnonzero(visits > 0)
    }


def trajectory_durations(trajectories) -> list[tuple[list[int], float]]:
    """(road sequence, duration seconds) for trajectories of length 10..100."""
    out = []
    for traj in trajectories:
        if 10 <= len(traj.road_ids) <= 100:
            out.append((traj.road_ids, float(traj.timestamps[-1] - traj.timestamps[0])))
    return out


# ---------------------------------------------------------------------------
# task evaluations
# ---------------------------------------------------------------------------

def eval_speed_inference(z: np.ndarray, speed_labels: dict[int, float], seeds,
                         folds: int = 5, config_hash: str = "") -> EvalReport:
    """Five-fold cross-validated linear regression on frozen representations."""
    roads = sorted(speed_labels)
    if len(roads) < max(10, folds):
        raise ValueError(f"need at least {max(10, folds)} labeled roads, got {len(roads)}")
    x_all = z[roads]
    y_all = np.array([speed_labels[r] for r in roads])
    per_seed = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        assignment = rng.permutation(len(roads)) % folds
        fold_mae, fold_rmse = [], []
        for f in range(folds):
            test = assignment == f
            head = LinearHead(z.shape[1], seed=seed * folds + f)
            head.fit(x_all[~test], y_all[~test])
            pred = head.predict(x_all[test])
            fold_mae.append(mae(pred, y_all[test]))
            fold_rmse.append(rmse(pred, y_all[test]))
        per_seed.append({"MAE": float(np.mean(fold_mae)), "RMSE": float(np.mean(fold_rmse))})
    return _summarize("speed_inference", per_seed, seeds,
                      split=f"{folds}-fold CV over {len(roads)} labeled roads",
                      head="single linear layer", config_hash=config_hash)


def _split_70_30(n: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * 0.7))
    return order[:cut], order[cut:]


def eval_travel_time(z: np.ndarray, trajectories, seeds, head_cfg: HeadConfig | None = None,
                     config_hash: str = "") -> EvalReport:
    """70/30 split; recurrent head over full road sequences predicts duration."""
    pairs = trajectory_durations(trajectories)
    if not pairs:
        raise ValueError("no trajectories of length 10..100")
    head_cfg = head_cfg or HeadConfig()
    sequences = [np.asarray(roads, dtype=np.int64) for roads, _ in pairs]
    durations = np.array([d for _, d in pairs])
    mu, sig = durations.mean(), max(durations.std(), 1e-9)
    per_seed = []
    for seed in seeds:
        train, test = _split_70_30(len(pairs), seed)
        head = RecurrentHead(z.shape[1], head_cfg.hidden, 1, seed=seed)
        norm_targets = (durations - mu) / sig
        _train_recurrent(head, z, [sequences[i] for i in train],
                         [norm_targets[i] for i in train], "regression", head_cfg, seed)
        with ad.no_grad():
            raw = head.forward_batch(z, [sequences[i] for i in test]).values[:, 0]
        preds = np.maximum(0.0, raw * sig + mu)  # clamp at zero
        per_seed.append({"MAE": mae(preds, durations[test]),
                         "RMSE": rmse(preds, durations[test])})
    return _summarize("travel_time", per_seed, seeds,
                      split=f"70/30 over {len(pairs)} trajectories",
                      head=RECURRENT_HEAD, config_hash=config_hash)


def eval_destination(z: np.ndarray, trajectories, seeds, head_cfg: HeadConfig | None = None,
                     config_hash: str = "") -> EvalReport:
    """70/30 split; recurrent head over the prefix ranks the final road."""
    n_classes = z.shape[0]
    if n_classes < 2:
        raise ValueError("need at least 2 roads to rank destinations")
    head_cfg = head_cfg or HeadConfig()
    pairs = [(np.asarray(t.road_ids[:-1], dtype=np.int64), t.road_ids[-1])
             for t in trajectories if 10 <= len(t.road_ids) <= 100]
    if not pairs:
        raise ValueError("no trajectories of length 10..100")
    per_seed = []
    for seed in seeds:
        train, test = _split_70_30(len(pairs), seed)
        head = RecurrentHead(z.shape[1], head_cfg.hidden, n_classes, seed=seed)
        _train_recurrent(head, z, [pairs[i][0] for i in train],
                         [pairs[i][1] for i in train], "classification", head_cfg, seed)
        with ad.no_grad():
            scores = head.forward_batch(z, [pairs[i][0] for i in test]).values
        truths = [pairs[i][1] for i in test]
        per_seed.append({"ACC@1": acc_at_1(scores, truths), "MRR": mrr(scores, truths)})
    return _summarize("destination", per_seed, seeds,
                      split=f"70/30 over {len(pairs)} trajectories",
                      head=RECURRENT_HEAD, config_hash=config_hash)
