"""Preprocessing: feature coding, geometric edge features, traffic dynamics.

Road features are coded per column (road_type, length, lanes, oneway);
length is equal-width binned, the rest are categorical by first
appearance. Edge features are [direction angle, centroid distance],
z-scored over all edges. Traffic dynamics count road visits per hour of
day, split weekday/weekend.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .network import RoadNetwork, RoadRecord, Trajectory

EARTH_RADIUS_M = 6371000.0
FEATURE_ORDER = ["road_type", "length", "lanes", "oneway"]

HOURS_PER_DAY = 24
DAY_CHANNELS = 2  # 0 = weekday, 1 = weekend


def haversine(lat_i, lon_i, lat_j, lon_j) -> float:
    """Great-circle distance in meters."""
    phi_i, phi_j = np.radians(lat_i), np.radians(lat_j)
    dphi = phi_j - phi_i
    dlam = np.radians(lon_j) - np.radians(lon_i)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi_i) * np.cos(phi_j) * np.sin(dlam / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


def _ecef_unit(lat, lon):
    phi, lam = np.radians(lat), np.radians(lon)
    return np.array([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])


def edge_angle(road_i: "RoadRecord", road_j: "RoadRecord") -> float:
    """Angle in degrees [0, 180] between the two roads' direction vectors.

    Directions are start-to-end vectors in earth-centered 3-D coordinates.
    """
    angles = []
    for r in (road_i, road_j):
        d = _ecef_unit(r.end_lat, r.end_lon) - _ecef_unit(r.start_lat, r.start_lon)
        norm = np.linalg.norm(d)
        if norm == 0.0:
            raise ValueError(f"road {r.id}: zero-length direction vector")
        angles.append(d / norm)
    cos = float(np.clip(np.dot(angles[0], angles[1]), -1.0, 1.0))
    return float(np.degrees(np.arccos(cos)))


# ---------------------------------------------------------------------------
# feature coding
# ---------------------------------------------------------------------------

@dataclass
class FeatureCodec:
    """Per-feature coding rules plus edge-feature normalization statistics.

    Categorical features map values by first appearance; unseen values
    encode to the reserved UNK code (== vocabulary size). Continuous
    features use half-open equal-width bins [lo, hi), top bin closed;
    out-of-range values clamp to the nearest bin.
    """

    categories: dict[str, list] = field(default_factory=dict)
    bin_edges: dict[str, list[float]] = field(default_factory=dict)
    edge_mean: list[float] = field(default_factory=lambda: [0.0, 0.0])
    edge_std: list[float] = field(default_factory=lambda: [1.0, 1.0])

    def vocab_size(self, name: str) -> int:
        if name in self.categories:
            return len(self.categories[name])
        return max(1, len(self.bin_edges[name]) - 1)

    def encode_value(self, name: str, value):
        """Return (code, is_unk)."""
        if name in self.categories:
            cats = self.categories[name]
            try:
                return cats.index(value), False
            except ValueError:
                return len(cats), True
        edges = self.bin_edges[name]
        nbins = max(1, len(edges) - 1)
        if nbins == 1:
            return 0, False
        code = int(np.searchsorted(edges, value, side="right")) - 1
        return min(max(code, 0), nbins - 1), False

    def encode_network(self, network: "RoadNetwork"):
        """Code every road; returns (N x C1 table, unk_count)."""
        raw = _raw_columns(network)
        n = len(network.roads)
        table = np.zeros((n, len(FEATURE_ORDER)), dtype=np.int64)
        unk = 0
        for j, name in enumerate(FEATURE_ORDER):
            for i in range(n):
                code, is_unk = self.encode_value(name, raw[name][i])
                table[i, j] = code
                unk += is_unk
        return table, unk

    def normalize_edge_features(self, raw: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.edge_mean)
        std = np.asarray(self.edge_std)
        return (raw - mean) / std

    def to_json(self) -> str:
        return json.dumps({
            "categories": self.categories,
            "bin_edges": self.bin_edges,
            "edge_mean": self.edge_mean,
            "edge_std": self.edge_std,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "FeatureCodec":
        obj = json.loads(text)
        return FeatureCodec(
            categories=obj["categories"],
            bin_edges={k: [float(x) for x in v] for k, v in obj["bin_edges"].items()},
            edge_mean=obj["edge_mean"],
            edge_std=obj["edge_std"],
        )


def _raw_columns(network: "RoadNetwork") -> dict[str, list]:
    return {
        "road_type": [r.road_type for r in network.roads],
        "length": [r.length for r in network.roads],
        "lanes": [r.lanes for r in network.roads],
        "oneway": [bool(r.oneway) for r in network.roads],
    }


def discretize_features(network: "RoadNetwork", bins: int = 8):
    """Fit a codec on the network and code it; returns (codec, N x C1 table)."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    raw = _raw_columns(network)
    codec = FeatureCodec()
    for name in FEATURE_ORDER:
        if name == "length":
            values = np.asarray(raw[name], dtype=np.float64)
            lo, hi = float(values.min()), float(values.max())
            if hi <= lo:
                warnings.warn(f"feature {name!r} has a degenerate range; using a single bin")
                codec.bin_edges[name] = [lo, lo]
            else:
                codec.bin_edges[name] = list(np.linspace(lo, hi, bins + 1))
        else:
            seen: list = []
            for v in raw[name]:
                if v not in seen:
                    seen.append(v)
            codec.categories[name] = seen
    table, _ = codec.encode_network(network)
    return codec, table


def compute_edge_features(network: "RoadNetwork", codec: FeatureCodec | None = None):
    """|E| x 2 table of [angle deg, centroid distance m], z-scored per column.

    Fits the normalization statistics (stored on the codec) unless the
    codec already carries them from a source city.
    """
    raw = np.zeros((len(network.edges), 2), dtype=np.float64)
    for k, (i, j) in enumerate(network.edges):
        ri, rj = network.roads[i], network.roads[j]
        raw[k, 0] = edge_angle(ri, rj)
        raw[k, 1] = haversine(ri.centroid_lat, ri.centroid_lon, rj.centroid_lat, rj.centroid_lon)
    if codec is None:
        codec = FeatureCodec()
    fit = codec.edge_mean == [0.0, 0.0] and codec.edge_std == [1.0, 1.0]
    if fit and len(network.edges) > 0:
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        std[std == 0.0] = 1.0
        codec.edge_mean = [float(x) for x in mean]
        codec.edge_std = [float(x) for x in std]
    return codec.normalize_edge_features(raw), codec


# ---------------------------------------------------------------------------
# traffic dynamics
# ---------------------------------------------------------------------------

@dataclass
class TrafficDynamics:
    """N x 24 x 2 visit-count tensor (hour of day x weekday/weekend)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3 or self.counts.shape[1:] != (HOURS_PER_DAY, DAY_CHANNELS):
            raise ValueError(f"counts must be N x 24 x 2, got {self.counts.shape}")

    @property
    def n_roads(self):
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())


def hour_and_weekend(ts: int, tz_offset_hours: int = 0) -> tuple[int, bool]:
    """Hour of day and weekend flag for an epoch-seconds timestamp."""
    local = int(ts) + tz_offset_hours * 3600
    hour = (local % 86400) // 3600
    dow = ((local // 86400) + 3) % 7  # epoch day 0 was a Thursday
    return int(hour), dow >= 5


def extract_traffic_dynamics(trajectories: list["Trajectory"], n_roads: int,
                             tz_offset_hours: int = 0) -> TrafficDynamics:
    """Count one visit per (road, timestamp) event across all trajectories."""
    counts = np.zeros((n_roads, HOURS_PER_DAY, DAY_CHANNELS), dtype=np.int64)
    for traj in trajectories:
        for road, ts in zip(traj.road_ids, traj.timestamps):
            if not 0 <= road < n_roads:
                raise ValueError(f"road ID {road} out of range [0, {n_roads})")
            hour, weekend = hour_and_weekend(ts, tz_offset_hours)
            counts[road, hour, int(weekend)] += 1
    return TrafficDynamics(counts)


_DYNAMICS_MAGIC = b"DSTD"


def save_dynamics(dynamics: TrafficDynamics, path):
    """16-byte header (magic, u32 N/T/C) then row-major u32 counts, little-endian."""
    n, t, c = dynamics.counts.shape
    with open(path, "wb") as fh:
        fh.write(_DYNAMICS_MAGIC)
        fh.write(struct.pack("<III", n, t, c))
        fh.write(dynamics.counts.astype("<u4").tobytes())


def load_dynamics(path) -> TrafficDynamics:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DYNAMICS_MAGIC:
            raise ValueError(f"bad dynamics file magic {magic!r}")
        n, t, c = struct.unpack("<III", fh.read(12))
        counts = np.frombuffer(fh.read(4 * n * t * c), dtype="<u4")
        return TrafficDynamics(counts.reshape(n, t, c).astype(np.int64))
