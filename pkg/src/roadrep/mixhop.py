"""Trajectory transition matrix: position-pair accumulation and row normalization.

For a trajectory of m roads, every ordered position pair p < q adds
m - (q - p) to cell [road_p, road_q], so near hops outweigh far ones.
Rows are then normalized to sum to 1; an all-zero row falls back to the
identity row. The normalized matrix seeds a trainable weighting applied
to the initial road embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class MixHopMatrix:
    raw: np.ndarray         # non-negative counts
    normalized: np.ndarray  # row-stochastic


def accumulate_mixhop(trajectories, n_roads: int) -> np.ndarray:
    """Integer-exact accumulation over all ordered position pairs."""
    raw = np.zeros((n_roads, n_roads), dtype=np.int64)
    for traj in trajectories:
        roads = np.asarray(traj.road_ids, dtype=np.int64)
        m = roads.size
        if m and (roads.min() < 0 or roads.max() >= n_roads):
            raise ValueError(f"road ID out of range [0, {n_roads})")
        for lag in range(1, m):
            np.add.at(raw, (roads[:-lag], roads[lag:]), m - lag)
    return raw


def row_normalize(raw: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; zero rows become identity rows."""
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise ValueError("row_normalize: negative entry")
    sums = raw.sum(axis=1)
    zero = sums == 0
    safe = np.where(zero, 1.0, sums)
    out = raw / safe[:, None]
    idx = np.flatnonzero(zero)
    out[idx, idx] = 1.0
    return out


def build_mixhop(trajectories, n_roads: int) -> MixHopMatrix:
    raw = accumulate_mixhop(trajectories, n_roads)
    return MixHopMatrix(raw=raw, normalized=row_normalize(raw))


def apply_mixhop(p_tilde: ad.Tensor, z_init: ad.Tensor) -> ad.Tensor:
    """Weight the initial embeddings; gradients flow into the matrix."""
    return ad.matmul(p_tilde, z_init)


_MATRIX_MAGIC = b"DSTP"


def save_matrix(matrix: np.ndarray, path):
    """Header (magic, u32 N) then row-major f64 values, little-endian."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ValueError(f"expected square matrix, got {matrix.shape}")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(matrix.astype("<f8").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MATRIX_MAGIC:
            raise ValueError(f"bad matrix file magic {magic!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        return np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n).astype(np.float64)
