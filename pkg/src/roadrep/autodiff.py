"""Minimal dense-tensor reverse-mode autodiff core, AdamW, and checkpoint IO.

Float64 throughout. Each op records a backward closure on the output
tensor; ``backward`` walks the recorded graph in reverse topological
order. Inference can run under ``no_grad()`` to skip recording.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class NumericalError(RuntimeError):
    """Raised on NaN gradients/losses during optimization."""


class Tensor:
    """Dense f64 tensor with optional gradient tracking.

    ``grad`` is populated by ``backward``; parameters keep their grad
    until explicitly zeroed (a second backward without zeroing is an
    error, so cross-step accumulation cannot happen silently).
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad}{tag})"

    # convenience arithmetic (thin wrappers over the primitives below)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward_fn):
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _shape_err(op, a, b):
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise add; also supports a trailing-axis bias (b 1-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.values.ndim == 1 and a.values.ndim > 1 and a.values.shape[-1] == b.values.shape[0]
    if not bias and a.values.shape != b.values.shape:
        raise _shape_err("add", a, b)
    out_values = a.values + b.values

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=tuple(range(g.ndim - 1))) if bias else g)

    return _make(out_values, (a, b), bwd)


def mul(a, b):
    """Elementwise product; also supports a trailing-axis 1-D factor."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.values.ndim == 1 and a.values.ndim > 1 and a.values.shape[-1] == b.values.shape[0]
    if not bias and a.values.shape != b.values.shape:
        raise _shape_err("mul", a, b)
    out_values = a.values * b.values

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.values)
        if b.requires_grad:
            gb = g * a.values
            _accum(b, gb.sum(axis=tuple(range(g.ndim - 1))) if bias else gb)

    return _make(out_values, (a, b), bwd)


def scale(a, c):
    """Multiply by a python float."""
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(a.values * c, (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise _shape_err("matmul", a, b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.values.T)
        if b.requires_grad:
            _accum(b, a.values.T @ g)

    return _make(a.values @ b.values, (a, b), bwd)


def transpose(a):
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got shape {a.values.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.values.T.copy(), (a,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.values.shape

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _make(a.values.reshape(shape).copy(), (a,), bwd)


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                _accum(p, piece)

    return _make(np.concatenate([p.values for p in parts], axis=axis), parts, bwd)


def slice_(a, key):
    """Basic slicing; the backward scatters into the source shape."""
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, key, g)
            _accum(a, full)

    return _make(a.values[key].copy(), (a,), bwd)


def gather_rows(a, idx):
    """Row gather by integer index array (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _make(a.values[idx].copy(), (a,), bwd)


def sum_(a):
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.values.shape).copy())

    return _make(np.asarray(a.values.sum()), (a,), bwd)


def mean_(a):
    return scale(sum_(a), 1.0 / _as_tensor(a).values.size)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

    return _make(y, (a,), bwd)


def leaky_relu(a, alpha=0.2):
    a = _as_tensor(a)
    pos = a.values > 0

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.where(pos, 1.0, alpha))

    return _make(np.where(pos, a.values, alpha * a.values), (a,), bwd)


def relu(a):
    a = _as_tensor(a)
    pos = a.values > 0

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * pos)

    return _make(np.where(pos, a.values, 0.0), (a,), bwd)


def elu(a, alpha=1.0):
    a = _as_tensor(a)
    pos = a.values > 0
    expm = alpha * (np.exp(np.minimum(a.values, 0.0)) - 1.0)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.where(pos, 1.0, expm + alpha))

    return _make(np.where(pos, a.values, expm), (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.values))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.values)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), bwd)


def log(a):
    a = _as_tensor(a)
    if (a.values <= 0).any():
        raise ValueError("log: non-positive input")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.values)

    return _make(np.log(a.values), (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis, then apply elementwise gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mu = a.values.mean(axis=-1, keepdims=True)
    var = a.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mu) * inv

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=tuple(range(g.ndim - 1))))
        if a.requires_grad:
            gx = g * gain.values
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(a, (gx - m1 - xhat * m2) * inv)

    return _make(xhat * gain.values + bias.values, (a, gain, bias), bwd)


def embedding_lookup(table, ids):
    """Gather rows of an embedding table by integer id."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.values.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table of {table.values.shape[0]} rows"
        )

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.values)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _make(table.values[ids].copy(), (table,), bwd)


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by a constant."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.values.shape:
        raise ValueError(f"masked_fill: mask shape {mask.shape} != value shape {a.values.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(mask, 0.0, g))

    return _make(np.where(mask, float(value), a.values), (a,), bwd)


def normalize_rows(a, eps=1e-12):
    """L2-normalize each row of a 2-D tensor."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError(f"normalize_rows: expected 2-D, got {a.values.shape}")
    norms = np.maximum(np.linalg.norm(a.values, axis=1, keepdims=True), eps)
    y = a.values / norms

    def bwd(g):
        if a.requires_grad:
            dot = (g * a.values).sum(axis=1, keepdims=True)
            _accum(a, g / norms - a.values * (dot / norms**3))

    return _make(y, (a,), bwd)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.values.shape != target.values.shape:
        raise _shape_err("mse_loss", pred, target)
    diff = pred.values - target.values
    n = diff.size

    def bwd(g):
        if pred.requires_grad:
            _accum(pred, g * 2.0 * diff / n)
        if target.requires_grad:
            _accum(target, -g * 2.0 * diff / n)

    return _make(np.asarray((diff**2).mean()), (pred, target), bwd)


def cross_entropy_loss(logits, labels):
    """Mean NLL of integer labels under softmax(logits); logits (B, K)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.shape != (logits.values.shape[0],):
        raise ValueError(
            f"cross_entropy_loss: logits {logits.values.shape} vs labels {labels.shape}"
        )
    b = logits.values.shape[0]
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(b), labels].mean()

    def bwd(g):
        if logits.requires_grad:
            grad = np.exp(logp)
            grad[np.arange(b), labels] -= 1.0
            _accum(logits, g * grad / b)

    return _make(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params=None):
    """Populate grads of every tracked tensor reachable from ``loss``.

    ``params``, when given, is an iterable of leaf tensors that must end
    up with a grad even if disconnected (filled with zeros). Raises if
    any reachable leaf already carries a grad — zero first.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        if node._backward is None and node.grad is not None:
            raise RuntimeError(
                f"backward: tensor {node.name or '<unnamed>'} already has a grad; "
                "zero grads before a new backward pass"
            )

    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.values)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, fan_in) -> np.ndarray:
    """U(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(max(int(fan_in), 1))
    return rng.uniform(-bound, bound, size=shape)


def parameter(values, name) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class AdamW:
    """Decoupled weight-decay Adam over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if np.isnan(g).any():
                raise NumericalError(f"NaN gradient in parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1**self.t)
            vhat = v / (1.0 - self.beta2**self.t)
            p.values -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.values)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradient_check(f, tensors, eps=1e-5):
    """Max relative error of analytic grads of f() against central differences.

    ``f`` must be a pure closure over ``tensors`` returning a scalar loss.
    Every element of every tensor is perturbed, so keep shapes small.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss, params=tensors)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.values.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            with no_grad():
                up = float(f().values)
            flat[i] = keep - eps
            with no_grad():
                dn = float(f().values)
            flat[i] = keep
            num = (up - dn) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(num), 1e-6)
            worst = max(worst, abs(gflat[i] - num) / denom)
    for t in tensors:
        t.grad = None
    return worst


# ---------------------------------------------------------------------------
# checkpoint archive: named f64 tensors, little-endian
# ---------------------------------------------------------------------------

_U32 = struct.Struct("<I")


def save_checkpoint(path, tensors):
    """Write a name -> array archive (u32 count; per tensor: name, rank, dims, f64 payload)."""
    with open(path, "wb") as fh:
        fh.write(_U32.pack(len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
            fh.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                fh.write(_U32.pack(d))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read an archive written by ``save_checkpoint``; returns name -> ndarray."""
    out = {}
    with open(path, "rb") as fh:
        (count,) = _U32.unpack(fh.read(4))
        for _ in range(count):
            (nlen,) = _U32.unpack(fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = _U32.unpack(fh.read(4))
            shape = tuple(_U32.unpack(fh.read(4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out
