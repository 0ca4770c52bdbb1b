"""Finite-difference verification suite over every primitive and composed layer.

Each entry builds a tiny seeded instance, compares analytic gradients
against central differences (eps 1e-5), and reports the max relative
error. The CLI exposes this as a subcommand that fails the run when any
entry exceeds the tolerance.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .fusion import gated_forward, init_gate_params
from .spatial import contrastive_loss, embed_features, gat_layer, hgnn_forward
from .temporal import TemporalConfig, TemporalModel, TrafficSequence, joint_loss

TOLERANCE = 1e-4


def _primitive_cases(rng):
    def t(*shape):
        return ad.Tensor(rng.standard_normal(shape), requires_grad=True)

    a34, b34 = t(3, 4), t(3, 4)
    bias4 = t(4)
    m34, m42 = t(3, 4), t(4, 2)
    sm = t(4, 5)
    sm_w = ad.Tensor(rng.standard_normal((4, 5)))
    act = t(4, 4)
    ln_x, ln_g, ln_b = t(3, 6), t(6), t(6)
    ln_w = ad.Tensor(rng.standard_normal((3, 6)))
    table = t(6, 3)
    ids = np.array([1, 1, 4, 0])
    mask = rng.random((4, 4)) < 0.3
    mask_w = ad.Tensor(rng.standard_normal((4, 4)))
    nr = t(4, 5)
    nr_w = ad.Tensor(rng.standard_normal((4, 5)))
    pos = ad.Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
    mse_t = ad.Tensor(rng.standard_normal((3, 4)))
    ce = t(5, 3)
    labels = np.array([0, 2, 1, 1, 0])
    slc = t(5, 4)
    gat_idx = np.array([0, 2, 2, 4])
    gr = t(5, 3)

    cases = {
        "add": (lambda: ad.sum_(ad.mul(ad.add(a34, b34), a34)), [a34, b34]),
        "add_bias": (lambda: ad.sum_(ad.mul(ad.add(a34, bias4), a34)), [a34, bias4]),
        "mul": (lambda: ad.sum_(ad.mul(a34, b34)), [a34, b34]),
        "scale": (lambda: ad.sum_(ad.mul(ad.scale(a34, -2.5), a34)), [a34]),
        "matmul": (lambda: ad.sum_(ad.mul(ad.matmul(m34, m42), ad.matmul(m34, m42))), [m34, m42]),
        "transpose": (lambda: ad.sum_(ad.mul(ad.transpose(m34), ad.transpose(m34))), [m34]),
        "reshape": (lambda: ad.sum_(ad.mul(ad.reshape(a34, (2, 6)), ad.reshape(a34, (2, 6)))), [a34]),
        "concat": (lambda: ad.sum_(ad.mul(ad.concat([a34, b34]), ad.concat([a34, b34]))), [a34, b34]),
        "slice": (lambda: ad.sum_(ad.mul(ad.slice_(slc, (slice(1, 4), slice(0, 2))),
                                         ad.slice_(slc, (slice(1, 4), slice(0, 2))))), [slc]),
        "gather_rows": (lambda: ad.sum_(ad.mul(ad.gather_rows(gr, gat_idx),
                                               ad.gather_rows(gr, gat_idx))), [gr]),
        "sum": (lambda: ad.sum_(ad.mul(a34, a34)), [a34]),
        "mean": (lambda: ad.mean_(ad.mul(a34, a34)), [a34]),
        "softmax": (lambda: ad.sum_(ad.mul(ad.softmax(sm, axis=1), sm_w)), [sm]),
        "leaky_relu": (lambda: ad.sum_(ad.mul(ad.leaky_relu(act, 0.2), act)), [act]),
        "relu": (lambda: ad.sum_(ad.mul(ad.relu(act), act)), [act]),
        "elu": (lambda: ad.sum_(ad.mul(ad.elu(act), act)), [act]),
        "sigmoid": (lambda: ad.sum_(ad.mul(ad.sigmoid(act), act)), [act]),
        "tanh": (lambda: ad.sum_(ad.mul(ad.tanh(act), act)), [act]),
        "log": (lambda: ad.sum_(ad.mul(ad.log(pos), pos)), [pos]),
        "layer_norm": (lambda: ad.sum_(ad.mul(ad.layer_norm(ln_x, ln_g, ln_b), ln_w)),
                       [ln_x, ln_g, ln_b]),
        "embedding_lookup": (lambda: ad.sum_(ad.mul(ad.embedding_lookup(table, ids),
                                                    ad.embedding_lookup(table, ids))), [table]),
        "masked_fill": (lambda: ad.sum_(ad.mul(
            ad.softmax(ad.masked_fill(act, mask, -1e30), axis=1), mask_w)), [act]),
        "normalize_rows": (lambda: ad.sum_(ad.mul(ad.normalize_rows(nr), nr_w)), [nr]),
        "mse_loss": (lambda: ad.mse_loss(a34, mse_t), [a34]),
        "cross_entropy_loss": (lambda: ad.cross_entropy_loss(ce, labels), [ce]),
    }
    return cases


def _composed_cases(rng):
    cases = {}

    # feature embedding layer
    tables = [ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True),
              ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True)]
    codes = np.array([[1, 2], [3, 0], [1, 2]])
    proj_w = ad.Tensor(rng.standard_normal((6, 4)) * 0.4, requires_grad=True)
    proj_b = ad.Tensor(np.zeros(4), requires_grad=True)
    emb_t = ad.Tensor(rng.standard_normal((3, 4)))
    cases["embedding_layer"] = (
        lambda: ad.mse_loss(embed_features(codes, tables, proj_w, proj_b), emb_t),
        tables + [proj_w, proj_b])

    # graph attention layer
    n, d = 4, 3
    adj = np.array([[1, 1, 0, 0], [0, 1, 1, 0], [1, 0, 1, 0], [0, 1, 0, 1]], dtype=bool)
    efeat = ad.Tensor(rng.standard_normal((n * n, 2)) * 0.2)
    z = ad.Tensor(rng.standard_normal((n, d)), requires_grad=True)
    head = tuple(ad.Tensor(rng.standard_normal(s) * 0.3, requires_grad=True)
                 for s in ((d, d), (d, 1), (d, 1), (2, 1)))
    out_w = ad.Tensor(rng.standard_normal((d, d)) * 0.3, requires_grad=True)
    out_b = ad.Tensor(np.zeros(d), requires_grad=True)
    gat_t = ad.Tensor(rng.standard_normal((n, d)))
    cases["gat_layer"] = (
        lambda: ad.mse_loss(gat_layer(z, adj, efeat, [head], out_w, out_b), gat_t),
        [z, *head, out_w, out_b])

    # hypergraph propagation layers
    prop = rng.dirichlet(np.ones(5), size=5)
    hz = ad.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    hlayers = [(ad.Tensor(rng.standard_normal((3, 3)) * 0.4, requires_grad=True),
                ad.Tensor(np.zeros(3), requires_grad=True)) for _ in range(2)]
    h_t = ad.Tensor(rng.standard_normal((5, 3)))
    cases["hgnn_layers"] = (
        lambda: ad.mse_loss(hgnn_forward(hz, prop, hlayers), h_t),
        [hz] + [t for pair in hlayers for t in pair])

    # contrastive objective
    cg = ad.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    ch = ad.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    cases["contrastive_loss"] = (
        lambda: contrastive_loss(cg, ch, np.arange(4), 0.5), [cg, ch])

    # transformer block plus both loss heads (joint objective, tiny sizes)
    cfg = TemporalConfig(d_t=8, n_blocks=1, n_heads=2)
    model = TemporalModel(6, cfg, seed=3)
    batch = [TrafficSequence(0, 0, rng.standard_normal(6)),
             TrafficSequence(1, 1, rng.standard_normal(6))]
    cases["transformer_block_joint_heads"] = (
        lambda: joint_loss(model, batch, 1.0, 1.0)[0], list(model.params().values()))

    # gated fusion
    branches = [ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(3)]
    gparams = init_gate_params(3, 3, seed=1)
    g_t = ad.Tensor(rng.standard_normal((4, 3)))
    cases["gated_fusion"] = (
        lambda: ad.mse_loss(gated_forward(branches, gparams), g_t),
        branches + [t for nm, t in gparams.items() if nm.startswith("gate.")])

    return cases


def run_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per primitive and composed layer."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, (f, tensors) in {**_primitive_cases(rng), **_composed_cases(rng)}.items():
        results[name] = ad.gradient_check(f, tensors)
    return results
