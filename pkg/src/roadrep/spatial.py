"""Spatial branch: feature embedding, graph attention view, hypergraph view,
and the cross-view contrastive objective.

Initial road embeddings come from per-feature lookup tables. A trainable
transition-matrix weighting (seeded from trajectory statistics) mixes
them before both views. The graph view is a multi-head attention network
over the directed road graph with edge features in the attention logits;
the hypergraph view propagates through the normalized incidence
operator. The two views are pulled together road-by-road with a
symmetric InfoNCE objective over mini-batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hypergraph import Hypergraph, propagation_matrix

LEAKY_ALPHA = 0.2
MASK_FILL = -1e30


@dataclass
class SpatialConfig:
    d: int = 32                 # representation width
    d_f: int = 16               # per-feature embedding width
    n_heads: int = 4
    gat_layers: int = 2
    hgnn_layers: int = 2
    epochs: int = 300
    batch: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    temperature: float = 0.5
    no_mixhop: bool = False
    freeze_mixhop: bool = False
    no_projection: bool = False
    hyper_positives: bool = False
    raw_degrees: bool = False
    self_loops: bool = True


@dataclass
class SpatialData:
    """Constant per-city inputs for the spatial branch."""

    codes: np.ndarray                 # N x C1 feature codes
    vocab_sizes: list[int]            # per feature, excluding the UNK row
    allowed: np.ndarray               # N x N bool attention mask (in-neighbors)
    edge_flat: np.ndarray             # (N*N) x 2 edge features, row i*N+j = edge j->i
    prop: np.ndarray                  # N x N hypergraph propagation operator
    p_init: np.ndarray | None         # row-stochastic init for the trainable weighting
    incidence: np.ndarray = field(default=None)  # for hyperedge-based positives

    @property
    def n_roads(self):
        return self.codes.shape[0]


def prepare_spatial_data(network, codes, vocab_sizes, edge_features, hypergraph: Hypergraph,
                         mixhop_normalized=None, raw_degrees=False,
                         self_loops=True) -> SpatialData:
    """Precompute the dense constants the branch trains against."""
    n = network.n_roads
    adj = np.asarray(network.adjacency.todense(), dtype=np.float64)
    allowed = adj.T > 0
    if self_loops:
        np.fill_diagonal(allowed, True)
    elif (~allowed.any(axis=1)).any():
        bad = int(np.flatnonzero(~allowed.any(axis=1))[0])
        raise ValueError(f"road {bad} has no in-edges and self-loops are disabled")

    edge_flat = np.zeros((n * n, 2))
    for (u, v), feats in zip(network.edges, edge_features):
        edge_flat[v * n + u] = feats

    return SpatialData(
        codes=np.asarray(codes, dtype=np.int64),
        vocab_sizes=list(vocab_sizes),
        allowed=allowed,
        edge_flat=edge_flat,
        prop=propagation_matrix(hypergraph, raw_degrees=raw_degrees),
        p_init=None if mixhop_normalized is None else np.asarray(mixhop_normalized, float),
        incidence=hypergraph.incidence,
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def embed_features(code_table, tables, proj_w=None, proj_b=None):
    """Per-feature lookup, concatenation, optional linear projection."""
    code_table = np.asarray(code_table, dtype=np.int64)
    if code_table.shape[1] != len(tables):
        raise ValueError(f"{code_table.shape[1]} feature columns vs {len(tables)} tables")
    parts = [ad.embedding_lookup(t, code_table[:, j]) for j, t in enumerate(tables)]
    z = ad.concat(parts, axis=-1)
    if proj_w is not None:
        z = ad.add(ad.matmul(z, proj_w), proj_b)
    return z


def gat_layer(z, allowed, edge_flat, head_params, out_w, out_b, collect_attention=None):
    """One attention layer; ``head_params`` is a list of (W, a_src, a_nbr, a_edge)."""
    n = z.shape[0]
    ones_col = ad.Tensor(np.ones((n, 1)))
    ones_row = ad.Tensor(np.ones((1, n)))
    blocked = ~allowed
    outs = []
    for w, a_src, a_nbr, a_edge in head_params:
        v = ad.matmul(z, w)
        s_src = ad.matmul(ad.matmul(v, a_src), ones_row)           # logit term of node i
        s_nbr = ad.matmul(ones_col, ad.transpose(ad.matmul(v, a_nbr)))  # term of neighbor j
        s_edge = ad.reshape(ad.matmul(edge_flat, a_edge), (n, n))
        logits = ad.leaky_relu(ad.add(ad.add(s_src, s_nbr), s_edge), LEAKY_ALPHA)
        att = ad.softmax(ad.masked_fill(logits, blocked, MASK_FILL), axis=1)
        if collect_attention is not None:
            collect_attention.append(att.values)
        outs.append(ad.elu(ad.matmul(att, v)))
    return ad.add(ad.matmul(ad.concat(outs, axis=-1), out_w), out_b)


def gat_forward(z, data: SpatialData, layers, collect_attention=None):
    """Stacked attention layers over the road graph.

    ``layers`` is a list of (head_params, out_w, out_b) triples.
    """
    edge_flat = ad.Tensor(data.edge_flat)
    for head_params, out_w, out_b in layers:
        z = gat_layer(z, data.allowed, edge_flat, head_params, out_w, out_b,
                      collect_attention=collect_attention)
    return z


def hgnn_forward(z, prop, layers=None, activation="relu"):
    """Hypergraph propagation; ``layers`` is a list of (W, b) or None for pure mixing.

    The nonlinearity is applied between layers, not after the last one.
    """
    prop_t = prop if isinstance(prop, ad.Tensor) else ad.Tensor(np.asarray(prop, float))
    act = {"relu": ad.relu, "identity": lambda t: t}[activation]
    if not layers:
        return ad.matmul(prop_t, z)
    for i, (w, b) in enumerate(layers):
        z = ad.matmul(prop_t, ad.matmul(z, w))
        if b is not None:
            z = ad.add(z, b)
        if i + 1 < len(layers):
            z = act(z)
    return z


def contrastive_loss(z_g, z_h, batch_ids, temperature=0.5, positives=None):
    """Symmetric InfoNCE between views over an in-batch similarity matrix.

    Cosine similarities divided by ``temperature``; each road's other-view
    row is its positive, all other in-batch rows are negatives. With a
    ``positives`` boolean matrix (batch x batch), rows average over every
    marked positive instead of the diagonal only.
    """
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    b = batch_ids.size
    if b < 2:
        raise ValueError("contrastive batch needs at least 2 roads (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    zg = ad.normalize_rows(ad.gather_rows(z_g, batch_ids))
    zh = ad.normalize_rows(ad.gather_rows(z_h, batch_ids))
    sim = ad.scale(ad.matmul(zg, ad.transpose(zh)), 1.0 / temperature)
    if positives is None:
        labels = np.arange(b)
        fwd = ad.cross_entropy_loss(sim, labels)
        rev = ad.cross_entropy_loss(ad.transpose(sim), labels)
    else:
        pos = np.asarray(positives, dtype=np.float64)
        if pos.shape != (b, b) or (pos.sum(axis=1) < 1).any():
            raise ValueError("positives must be batch x batch with every row non-empty")
        weights = ad.Tensor(pos / (b * pos.sum(axis=1, keepdims=True)))
        weights_t = ad.Tensor(pos.T / (b * pos.T.sum(axis=1, keepdims=True)))
        fwd = ad.scale(ad.sum_(ad.mul(ad.log(ad.softmax(sim, axis=1)), weights)), -1.0)
        rev = ad.scale(ad.sum_(ad.mul(ad.log(ad.softmax(ad.transpose(sim), axis=1)), weights_t)), -1.0)
    return ad.scale(ad.add(fwd, rev), 0.5)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class SpatialModel:
    """Holds every trainable tensor of the spatial branch."""

    def __init__(self, data: SpatialData, config: SpatialConfig, seed: int):
        if config.d % config.n_heads:
            raise ValueError(f"d={config.d} not divisible by n_heads={config.n_heads}")
        self.config = config
        rng = np.random.default_rng(seed)
        d, d_f = config.d, config.d_f
        dh = d // config.n_heads

        # +1 row per table: reserved UNK code for transfer
        self.tables = [
            ad.parameter(ad.uniform_init(rng, (v + 1, d_f), d_f), f"embed.{j}")
            for j, v in enumerate(data.vocab_sizes)
        ]
        c1 = len(data.vocab_sizes)
        self.proj_w = ad.parameter(ad.uniform_init(rng, (c1 * d_f, d), c1 * d_f), "embed.proj.w")
        self.proj_b = ad.parameter(np.zeros(d), "embed.proj.b")

        if config.no_mixhop or data.p_init is None:
            self.p_tilde = None
        else:
            self.p_tilde = ad.Tensor(data.p_init.copy(),
                                     requires_grad=not config.freeze_mixhop, name="mixhop.p")

        self.gat_layers = []
        for layer in range(config.gat_layers):
            heads = []
            for h in range(config.n_heads):
                prefix = f"gat.{layer}.{h}"
                heads.append((
                    ad.parameter(ad.uniform_init(rng, (d, dh), d), f"{prefix}.w"),
                    ad.parameter(ad.uniform_init(rng, (dh, 1), dh), f"{prefix}.a_src"),
                    ad.parameter(ad.uniform_init(rng, (dh, 1), dh), f"{prefix}.a_nbr"),
                    ad.parameter(ad.uniform_init(rng, (2, 1), 2), f"{prefix}.a_edge"),
                ))
            out_w = ad.parameter(ad.uniform_init(rng, (d, d), d), f"gat.{layer}.out.w")
            out_b = ad.parameter(np.zeros(d), f"gat.{layer}.out.b")
            self.gat_layers.append((heads, out_w, out_b))

        self.hgnn_layers = [
            (ad.parameter(ad.uniform_init(rng, (d, d), d), f"hgnn.{i}.w"),
             ad.parameter(np.zeros(d), f"hgnn.{i}.b"))
            for i in range(config.hgnn_layers)
        ]

        self.head_g_w = ad.parameter(ad.uniform_init(rng, (d, d), d), "head.g.w")
        self.head_g_b = ad.parameter(np.zeros(d), "head.g.b")
        self.head_h_w = ad.parameter(ad.uniform_init(rng, (d, d), d), "head.h.w")
        self.head_h_b = ad.parameter(np.zeros(d), "head.h.b")

    def params(self) -> dict[str, ad.Tensor]:
        out = {}
        for t in self.tables:
            out[t.name] = t
        out["embed.proj.w"] = self.proj_w
        out["embed.proj.b"] = self.proj_b
        if self.p_tilde is not None and self.p_tilde.requires_grad:
            out["mixhop.p"] = self.p_tilde
        for heads, out_w, out_b in self.gat_layers:
            for w, a_src, a_nbr, a_edge in heads:
                out[w.name] = w
                out[a_src.name] = a_src
                out[a_nbr.name] = a_nbr
                out[a_edge.name] = a_edge
            out[out_w.name] = out_w
            out[out_b.name] = out_b
        for w, b in self.hgnn_layers:
            out[w.name] = w
            out[b.name] = b
        out["head.g.w"] = self.head_g_w
        out["head.g.b"] = self.head_g_b
        out["head.h.w"] = self.head_h_w
        out["head.h.b"] = self.head_h_b
        return out

    def state(self) -> dict[str, np.ndarray]:
        tensors = {name: t.values for name, t in self.params().items()}
        if self.p_tilde is not None:
            tensors["mixhop.p"] = self.p_tilde.values
        return tensors

    def load_state(self, state: dict[str, np.ndarray]):
        targets = self.params()
        if self.p_tilde is not None:
            targets.setdefault("mixhop.p", self.p_tilde)
        for name, tensor in targets.items():
            if name in state:
                tensor.values = np.array(state[name], dtype=np.float64)

    def forward(self, data: SpatialData, collect_attention=None):
        """Both views; returns (z_g, z_h, proj_g, proj_h)."""
        z_init = embed_features(data.codes, self.tables, self.proj_w, self.proj_b)
        z_hop = ad.matmul(self.p_tilde, z_init) if self.p_tilde is not None else z_init
        z_g = gat_forward(z_hop, data, self.gat_layers, collect_attention=collect_attention)
        z_h = hgnn_forward(z_hop, data.prop, self.hgnn_layers)
        if self.config.no_projection:
            return z_g, z_h, z_g, z_h
        proj_g = ad.add(ad.matmul(z_g, self.head_g_w), self.head_g_b)
        proj_h = ad.add(ad.matmul(z_h, self.head_h_w), self.head_h_b)
        return z_g, z_h, proj_g, proj_h


def train_spatial(data: SpatialData, config: SpatialConfig, seed: int):
    """Seeded contrastive pre-training; returns (z_g, z_h, model, history).

    History rows are (step, loss). All roads are visited once per epoch
    in shuffled mini-batches.
    """
    model = SpatialModel(data, config, seed)
    opt = ad.AdamW(model.params(), lr=config.lr, weight_decay=config.weight_decay)
    if model.p_tilde is not None and model.p_tilde.requires_grad:
        # the transition weighting keeps its own optimizer without decay:
        # decay would wash out the row-stochastic initialization
        del opt.params["mixhop.p"]
        opt_p = ad.AdamW({"mixhop.p": model.p_tilde}, lr=config.lr, weight_decay=0.0)
    else:
        opt_p = None
    rng = np.random.default_rng(seed + 1)
    n = data.n_roads
    batch = max(2, min(config.batch, n))
    history = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            ids = order[lo:lo + batch]
            if ids.size < 2:
                continue
            _, _, pg, ph = model.forward(data)
            positives = None
            if config.hyper_positives:
                inc = data.incidence[ids]
                positives = (inc @ inc.T) > 0
                np.fill_diagonal(positives, True)
            loss = contrastive_loss(pg, ph, ids, config.temperature, positives=positives)
            if np.isnan(loss.values):
                raise ad.NumericalError(f"NaN contrastive loss at step {step}")
            ad.backward(loss, params=list(opt.params.values())
                        + ([model.p_tilde] if opt_p else []))
            opt.step()
            opt.zero_grad()
            if opt_p:
                opt_p.step()
                opt_p.zero_grad()
            history.append((step, float(loss.values)))
            step += 1
    with ad.no_grad():
        z_g, z_h, _, _ = model.forward(data)
    return z_g.values, z_h.values, model, history
