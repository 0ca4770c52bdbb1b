"""Combine branch representations: concatenation, summation, or a gated mixture."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FUSION_MODES = ("concat", "sum", "gated")


@dataclass
class FusedRepresentation:
    z: np.ndarray
    mode: str
    provenance: dict[str, str]

    @property
    def d_out(self):
        return self.z.shape[1]


def _hash_array(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def init_gate_params(d: int, n_branches: int, seed: int) -> dict[str, ad.Tensor]:
    """Per-branch sigmoid gates computed from the concatenated branches."""
    rng = np.random.default_rng(seed)
    params = {}
    for k in range(n_branches):
        params[f"gate.{k}.w"] = ad.parameter(
            ad.uniform_init(rng, (n_branches * d, d), n_branches * d), f"gate.{k}.w")
        params[f"gate.{k}.b"] = ad.parameter(np.zeros(d), f"gate.{k}.b")
    params["head.w"] = ad.parameter(ad.uniform_init(rng, (d, 1), d), "head.w")
    params["head.b"] = ad.parameter(np.zeros(1), "head.b")
    return params


def gated_forward(branches: list[ad.Tensor], params: dict[str, ad.Tensor]) -> ad.Tensor:
    """Z = sum_k sigmoid(gate_k([z_1 || ... || z_K])) * z_k."""
    joined = ad.concat(branches, axis=-1)
    out = None
    for k, branch in enumerate(branches):
        gate = ad.sigmoid(ad.add(ad.matmul(joined, params[f"gate.{k}.w"]), params[f"gate.{k}.b"]))
        term = ad.mul(gate, branch)
        out = term if out is None else ad.add(out, term)
    return out


def _fit_gated(branches: list[np.ndarray], targets: np.ndarray, ids: np.ndarray,
               seed: int, steps: int = 200, lr: float = 1e-2) -> np.ndarray:
    """Brief regression fit of the gates against downstream targets."""
    d = branches[0].shape[1]
    params = init_gate_params(d, len(branches), seed)
    opt = ad.AdamW(params, lr=lr, weight_decay=0.0)
    tensors = [ad.Tensor(b[ids]) for b in branches]
    y = ad.Tensor(targets[:, None])
    for _ in range(steps):
        z = gated_forward(tensors, params)
        pred = ad.add(ad.matmul(z, params["head.w"]), params["head.b"])
        loss = ad.mse_loss(pred, y)
        ad.backward(loss, params=opt.params.values())
        opt.step()
        opt.zero_grad()
    with ad.no_grad():
        full = gated_forward([ad.Tensor(b) for b in branches], params)
    return full.values


def fuse(z_g, z_h, z_d=None, mode: str = "concat", fit_targets=None, fit_ids=None,
         seed: int = 0, provenance: dict[str, str] | None = None) -> FusedRepresentation:
    """Fuse available branches; ``z_d`` is None under the no-temporal ablation.

    ``sum`` and ``gated`` require equal branch widths; ``gated`` also
    needs (fit_targets, fit_ids) for its brief fit pass.
    """
    branches = [np.asarray(b, dtype=np.float64) for b in (z_g, z_h, z_d) if b is not None]
    names = [n for n, b in zip(("graph", "hyper", "temporal"), (z_g, z_h, z_d)) if b is not None]
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    rows = {b.shape[0] for b in branches}
    if len(rows) != 1:
        raise ValueError(f"row counts differ: {[b.shape for b in branches]}")
    if mode in ("sum", "gated") and len({b.shape[1] for b in branches}) != 1:
        raise ValueError(f"{mode} fusion needs equal widths, got {[b.shape[1] for b in branches]}")

    if mode == "concat":
        z = np.concatenate(branches, axis=1)
    elif mode == "sum":
        z = np.sum(branches, axis=0)
    else:
        if fit_targets is None or fit_ids is None:
            raise ValueError("gated fusion needs fit_targets and fit_ids for its fit pass")
        z = _fit_gated(branches, np.asarray(fit_targets, float),
                       np.asarray(fit_ids, np.int64), seed)

    if provenance is None:
        provenance = {name: _hash_array(b) for name, b in zip(names, branches)}
    return FusedRepresentation(z=z, mode=mode, provenance=provenance)
