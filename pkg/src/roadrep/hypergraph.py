"""Hypergraph construction over roads and its normalized propagation operator.

Three hyperedge kinds: spectral functional zones, one hyperedge per road
type, and connected clusters of geographically close one-way roads.
Nodes left uncovered when kinds are ablated get singleton fallback
edges, so node degrees stay positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

KIND_FUNCTIONAL = "functional_zone"
KIND_SAME_TYPE = "same_type"
KIND_ONEWAY = "oneway_adjacent"
KIND_SINGLETON = "singleton"


@dataclass
class Hypergraph:
    incidence: np.ndarray          # N x K binary
    kinds: list[str]               # length K

    def __post_init__(self):
        self.incidence = np.asarray(self.incidence, dtype=np.float64)
        if self.incidence.ndim != 2 or self.incidence.shape[1] != len(self.kinds):
            raise ValueError(f"incidence {self.incidence.shape} inconsistent with {len(self.kinds)} kinds")
        if ((self.incidence != 0) & (self.incidence != 1)).any():
            raise ValueError("incidence entries must be 0/1")
        if (self.incidence.sum(axis=0) < 1).any():
            raise ValueError("empty hyperedge")

    @property
    def n_nodes(self):
        return self.incidence.shape[0]

    @property
    def n_edges(self):
        return self.incidence.shape[1]

    def node_degrees(self) -> np.ndarray:
        return self.incidence.sum(axis=1)

    def edge_degrees(self) -> np.ndarray:
        return self.incidence.sum(axis=0)

    def members(self, k: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.incidence[:, k])]


def propagation_matrix(hg: Hypergraph, raw_degrees: bool = False) -> np.ndarray:
    """Node-to-node operator via hyperedges.

    Default uses inverse degree matrices (row-stochastic averaging);
    ``raw_degrees`` multiplies by the degree matrices themselves instead,
    which blows up in magnitude and exists only for comparison.
    """
    a = hg.incidence
    dn = hg.node_degrees()
    de = hg.edge_degrees()
    if (dn == 0).any():
        raise ValueError("node with zero hyperedge degree")
    if raw_degrees:
        return np.diag(dn) @ a @ np.diag(de) @ a.T
    return np.diag(1.0 / dn) @ a @ np.diag(1.0 / de) @ a.T


# ---------------------------------------------------------------------------
# dense symmetric eigensolver (cyclic Jacobi) and seeded k-means
# ---------------------------------------------------------------------------

class EigenConvergenceError(RuntimeError):
    pass


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-9, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns). Converges
    when the off-diagonal Frobenius norm drops below ``tol``.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("jacobi_eigh expects a symmetric square matrix")
    v = np.eye(n)

    mask = ~np.eye(n, dtype=bool)

    def offdiag_norm():
        return np.sqrt((a[mask] ** 2).sum())

    for _ in range(max_sweeps):
        if offdiag_norm() < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                if abs(theta) > 1e10:
                    t = 1.0 / (2.0 * theta)
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p, rot_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p, rot_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                rot_p, rot_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * rot_p - s * rot_q
                v[:, q] = s * rot_p + c * rot_q
    else:
        raise EigenConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")

    order = np.argsort(np.diag(a), kind="stable")
    values = np.diag(a)[order]
    vectors = v[:, order]
    # deterministic sign: largest-magnitude component of each vector is positive
    for j in range(n):
        k = int(np.argmax(np.abs(vectors[:, j])))
        if vectors[k, j] < 0:
            vectors[:, j] = -vectors[:, j]
    return values, vectors


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Seeded k-means++ labels; empty clusters steal the farthest point."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")

    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(0, n))]
    dist2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total <= 0:
            centers[j] = points[int(rng.integers(0, n))]
        else:
            centers[j] = points[int(rng.choice(n, p=dist2 / total))]
        dist2 = np.minimum(dist2, ((points - centers[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d.argmin(axis=1)
        for j in range(k):
            members = new_labels == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
            else:
                far = int(d.min(axis=1).argmax())
                new_labels[far] = j
                centers[j] = points[far]
        if (new_labels == labels).all():
            break
        labels = new_labels
    return labels


def spectral_zones(adjacency, k_zones: int, seed: int) -> np.ndarray:
    """Cluster roads into functional zones from the symmetrized graph.

    Embeds nodes in the bottom eigenvectors of the normalized Laplacian
    (rows unit-normalized), then runs seeded k-means.
    """
    a = np.asarray(adjacency.todense() if hasattr(adjacency, "todense") else adjacency,
                   dtype=np.float64)
    n = a.shape[0]
    if k_zones > n:
        raise ValueError(f"k_zones={k_zones} exceeds {n} roads")
    sym = ((a + a.T) > 0).astype(np.float64)
    np.fill_diagonal(sym, 0.0)
    deg = sym.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    lap = np.eye(n) - inv_sqrt[:, None] * sym * inv_sqrt[None, :]

    _, vectors = jacobi_eigh(lap)
    emb = vectors[:, :k_zones]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.maximum(norms, 1e-12)
    return kmeans(emb, k_zones, seed)


# ---------------------------------------------------------------------------
# hyperedge builders
# ---------------------------------------------------------------------------

def build_hyperedges_functional(network, k_zones: int, seed: int) -> list[list[int]]:
    """One hyperedge per spectral functional zone."""
    if k_zones < 1:
        raise ValueError("k_zones must be >= 1")
    if k_zones == 1:
        return [list(range(network.n_roads))]
    labels = spectral_zones(network.adjacency, k_zones, seed)
    return [sorted(np.flatnonzero(labels == j).tolist()) for j in range(k_zones)
            if (labels == j).any()]


def build_hyperedges_same_type(network) -> list[list[int]]:
    """One hyperedge per distinct road type; partitions the roads."""
    groups: dict[str, list[int]] = {}
    for r in network.roads:
        groups.setdefault(r.road_type, []).append(r.id)
    return [groups[t] for t in sorted(groups)]


def build_hyperedges_oneway_adjacent(network, radius_m: float = 200.0) -> list[list[int]]:
    """Connected clusters of one-way roads within ``radius_m`` of each other.

    Components of the centroid-proximity graph; singletons are dropped.
    """
    from .features import haversine

    ids = [r.id for r in network.roads if r.oneway]
    if not ids:
        return []
    coords = np.array([[network.roads[i].centroid_lat, network.roads[i].centroid_lon]
                       for i in ids])
    parent = list(range(len(ids)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            if haversine(coords[a, 0], coords[a, 1], coords[b, 0], coords[b, 1]) <= radius_m:
                parent[find(a)] = find(b)

    comps: dict[int, list[int]] = {}
    for x, rid in enumerate(ids):
        comps.setdefault(find(x), []).append(rid)
    return [sorted(m) for _, m in sorted(comps.items()) if len(m) >= 2]


def build_hypergraph(network, k_zones: int = 8, radius_m: float = 200.0, seed: int = 0,
                     use_functional: bool = True, use_same_type: bool = True,
                     use_oneway: bool = True) -> Hypergraph:
    """Assemble the incidence matrix from the enabled hyperedge kinds.

    Any node not covered by an enabled kind gets a singleton fallback
    hyperedge.
    """
    edge_sets: list[tuple[str, list[int]]] = []
    if use_functional:
        edge_sets += [(KIND_FUNCTIONAL, m) for m in build_hyperedges_functional(network, k_zones, seed)]
    if use_same_type:
        edge_sets += [(KIND_SAME_TYPE, m) for m in build_hyperedges_same_type(network)]
    if use_oneway:
        edge_sets += [(KIND_ONEWAY, m) for m in build_hyperedges_oneway_adjacent(network, radius_m)]

    n = network.n_roads
    covered = np.zeros(n, dtype=bool)
    for _, members in edge_sets:
        covered[members] = True
    edge_sets += [(KIND_SINGLETON, [int(i)]) for i in np.flatnonzero(~covered)]

    incidence = np.zeros((n, len(edge_sets)))
    kinds = []
    for k, (kind, members) in enumerate(edge_sets):
        incidence[members, k] = 1.0
        kinds.append(kind)
    return Hypergraph(incidence=incidence, kinds=kinds)


def save_hypergraph(hg: Hypergraph, path):
    """JSON lines, one hyperedge per line: {"kind": str, "members": [...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(hg.n_edges):
            fh.write(json.dumps({"kind": hg.kinds[k], "members": hg.members(k)}) + "\n")


def load_hypergraph(path, n_nodes: int) -> Hypergraph:
    kinds = []
    member_lists = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            kinds.append(obj["kind"])
            member_lists.append([int(i) for i in obj["members"]])
    incidence = np.zeros((n_nodes, len(kinds)))
    for k, members in enumerate(member_lists):
        incidence[members, k] = 1.0
    return Hypergraph(incidence=incidence, kinds=kinds)
