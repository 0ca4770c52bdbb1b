"""Road network and trajectory domain types, file ingestion, synthetic cities.

File formats:
  roads CSV      id,start_lon,start_lat,end_lon,end_lat,road_type,length,lanes,oneway
  edges CSV      from_id,to_id
  trajectories   JSON lines, one object per line: {"roads":[int,...],"times":[int,...]}

Road IDs are densely re-indexed at load (0..N-1 in file order); the
original ids are kept on the network for trajectory remapping.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .features import haversine

ROADS_HEADER = ["id", "start_lon", "start_lat", "end_lon", "end_lat",
                "road_type", "length", "lanes", "oneway"]
EDGES_HEADER = ["from_id", "to_id"]


class IngestError(ValueError):
    """Malformed or inconsistent input file; message carries the line number."""


@dataclass
class RoadRecord:
    id: int
    start_lon: float
    start_lat: float
    end_lon: float
    end_lat: float
    road_type: str
    length: float
    lanes: int
    oneway: bool
    centroid_lon: float = 0.0
    centroid_lat: float = 0.0

    def __post_init__(self):
        if self.centroid_lon == 0.0 and self.centroid_lat == 0.0:
            self.centroid_lon = (self.start_lon + self.end_lon) / 2.0
            self.centroid_lat = (self.start_lat + self.end_lat) / 2.0


@dataclass
class Trajectory:
    road_ids: list[int]
    timestamps: list[int]

    def __len__(self):
        return len(self.road_ids)


@dataclass
class RoadNetwork:
    roads: list[RoadRecord]
    edges: list[tuple[int, int]]
    adjacency: sp.csr_matrix
    orig_ids: list[int]
    id_map: dict[int, int] = field(repr=False, default_factory=dict)
    road_codes: np.ndarray | None = None      # N x C1, filled by feature coding
    edge_features: np.ndarray | None = None   # |E| x 2, filled by edge feature pass

    @property
    def n_roads(self):
        return len(self.roads)

    def out_neighbors(self, i: int) -> np.ndarray:
        row = self.adjacency.indptr
        return self.adjacency.indices[row[i]:row[i + 1]]


def _check_record(rec: RoadRecord, line: int):
    for lon in (rec.start_lon, rec.end_lon):
        if not -180.0 <= lon <= 180.0:
            raise IngestError(f"roads line {line}: longitude {lon} out of range")
    for lat in (rec.start_lat, rec.end_lat):
        if not -90.0 <= lat <= 90.0:
            raise IngestError(f"roads line {line}: latitude {lat} out of range")
    if not rec.length > 0:
        raise IngestError(f"roads line {line}: length must be positive, got {rec.length}")
    if rec.lanes < 1:
        raise IngestError(f"roads line {line}: lanes must be >= 1, got {rec.lanes}")


def _build_adjacency(n: int, edges: list[tuple[int, int]]) -> sp.csr_matrix:
    if edges:
        rows, cols = zip(*edges)
        data = np.ones(len(edges), dtype=np.uint8)
        adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        adj.data[:] = 1  # collapse duplicate edges
    else:
        adj = sp.csr_matrix((n, n), dtype=np.uint8)
    return adj


def load_network(roads_path, edges_path) -> RoadNetwork:
    """Load and validate a road network; ids are densely re-indexed."""
    roads: list[RoadRecord] = []
    orig_ids: list[int] = []
    id_map: dict[int, int] = {}
    pending_oneway: list[tuple[int, int]] = []  # (dense id, line) rows lacking the flag

    with open(roads_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ROADS_HEADER:
            raise IngestError(f"roads line 1: expected header {','.join(ROADS_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ROADS_HEADER):
                raise IngestError(f"roads line {line}: expected {len(ROADS_HEADER)} columns, got {len(row)}")
            try:
                orig = int(row[0])
                rec = RoadRecord(
                    id=len(roads),
                    start_lon=float(row[1]), start_lat=float(row[2]),
                    end_lon=float(row[3]), end_lat=float(row[4]),
                    road_type=row[5],
                    length=float(row[6]),
                    lanes=int(row[7]),
                    oneway=row[8].strip() in ("1", "true", "True"),
                )
            except (TypeError, ValueError) as exc:
                raise IngestError(f"roads line {line}: malformed row ({exc})") from None
            if orig in id_map:
                raise IngestError(f"roads line {line}: duplicate road ID {orig}")
            if row[8].strip() == "":
                pending_oneway.append((rec.id, line))
            _check_record(rec, line)
            id_map[orig] = rec.id
            orig_ids.append(orig)
            roads.append(rec)

    edges: list[tuple[int, int]] = []
    with open(edges_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EDGES_HEADER:
            raise IngestError(f"edges line 1: expected header {','.join(EDGES_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise IngestError(f"edges line {line}: expected 2 columns, got {len(row)}")
            try:
                u, v = int(row[0]), int(row[1])
            except ValueError as exc:
                raise IngestError(f"edges line {line}: malformed row ({exc})") from None
            for endpoint in (u, v):
                if endpoint not in id_map:
                    raise IngestError(f"edges line {line}: dangling endpoint {endpoint}")
            edges.append((id_map[u], id_map[v]))

    if pending_oneway:
        # missing flag: oneway iff the reverse connection is absent
        edge_set = set(edges)
        for dense_id, _line in pending_oneway:
            outgoing = [b for a, b in edges if a == dense_id]
            roads[dense_id].oneway = all((b, dense_id) not in edge_set for b in outgoing)

    return RoadNetwork(
        roads=roads,
        edges=edges,
        adjacency=_build_adjacency(len(roads), edges),
        orig_ids=orig_ids,
        id_map=id_map,
    )


def write_network(network: RoadNetwork, roads_path, edges_path):
    """Emit the canonical CSV pair (dense id space)."""
    with open(roads_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROADS_HEADER)
        for r in network.roads:
            writer.writerow([
                r.id,
                repr(r.start_lon), repr(r.start_lat), repr(r.end_lon), repr(r.end_lat),
                r.road_type, repr(r.length), r.lanes, int(r.oneway),
            ])
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EDGES_HEADER)
        for u, v in network.edges:
            writer.writerow([u, v])


def load_trajectories(path, network: RoadNetwork, strict: bool = True):
    """Read trajectories (original id space), remap to dense ids.

    Returns (trajectories, violation_count). A reachability break drops
    the whole trajectory in strict mode and splits it at the break in
    lenient mode; either way it counts one violation per break.
    """
    adj = network.adjacency
    out: list[Trajectory] = []
    violations = 0
    with open(path, encoding="utf-8") as fh:
        for line, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
                roads = [int(r) for r in obj["roads"]]
                times = [int(t) for t in obj["times"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"trajectories line {line}: malformed row ({exc})") from None
            if len(roads) != len(times) or not roads:
                raise IngestError(f"trajectories line {line}: roads/times length mismatch")
            for r in roads:
                if r not in network.id_map:
                    raise IngestError(f"trajectories line {line}: unknown road ID {r}")
            if any(b < a for a, b in zip(times, times[1:])):
                raise IngestError(f"trajectories line {line}: non-monotonic timestamps")
            dense = [network.id_map[r] for r in roads]

            breaks = [k for k in range(len(dense) - 1) if adj[dense[k], dense[k + 1]] == 0]
            if not breaks:
                out.append(Trajectory(dense, times))
                continue
            violations += len(breaks)
            if strict:
                continue
            start = 0
            for k in breaks + [len(dense) - 1]:
                piece = slice(start, k + 1)
                if k + 1 - start >= 1:
                    out.append(Trajectory(dense[piece], times[piece]))
                start = k + 1
    return out, violations


def save_trajectories(trajectories: list[Trajectory], path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(json.dumps({"roads": t.road_ids, "times": t.timestamps}) + "\n")


def validate_trajectories(trajectories, network: RoadNetwork):
    """Strict-mode check for already-dense trajectories; returns violation count."""
    adj = network.adjacency
    bad = 0
    for t in trajectories:
        if any(b < a for a, b in zip(t.timestamps, t.timestamps[1:])):
            bad += 1
            continue
        if any(adj[a, b] == 0 for a, b in zip(t.road_ids, t.road_ids[1:])):
            bad += 1
    return bad


# ---------------------------------------------------------------------------
# synthetic city
# ---------------------------------------------------------------------------

LANES_BY_TYPE = {"residential": 1, "tertiary": 2, "trunk": 3, "primary": 4}

# free-flow speed (m/s) and congestion factors used by the simulator;
# traversal time is a deterministic function of road type, hour, and day kind
BASE_SPEED = {"residential": 8.0, "tertiary": 11.0, "primary": 14.0, "trunk": 20.0}
_RUSH_HOURS = {7, 8, 9, 17, 18, 19}
_WEEKEND_BUSY = {12, 13, 14, 15, 16}


def congestion_factor(road_type: str, hour: int, weekend: bool) -> float:
    busy = road_type in ("primary", "trunk")
    if not weekend and hour in _RUSH_HOURS:
        return 0.55 if busy else 0.85
    if weekend and hour in _WEEKEND_BUSY:
        return 0.75 if busy else 0.95
    return 1.0


def traversal_seconds(road: RoadRecord, hour: int, weekend: bool) -> int:
    speed = BASE_SPEED.get(road.road_type, 8.0) * congestion_factor(road.road_type, hour, weekend)
    return max(1, int(round(road.length / speed)))


def generate_synthetic_city(rows: int, cols: int, ring_count: int, seed: int) -> RoadNetwork:
    """Deterministic grid city: two-way grid streets, one-way trunk rings.

    Streets along the central row/column are primary arterials; every
    third row/column is tertiary; the rest residential. Ring k follows
    the rectangle inset k intersections from the boundary, clockwise.
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"rows and cols must be >= 2, got {rows}x{cols}")
    if ring_count < 0:
        raise ValueError("ring_count must be >= 0")

    rng = np.random.default_rng(seed)
    base_lon, base_lat = 116.30, 39.90
    jitter = rng.uniform(-2e-4, 2e-4, size=(rows, cols, 2))
    lon = base_lon + np.arange(cols) * 5e-3 + jitter[:, :, 0]
    lat = base_lat + np.arange(rows)[:, None] * 4e-3 + jitter[:, :, 1]

    def point(r, c):
        return float(lon[r, c]), float(lat[r, c])

    roads: list[RoadRecord] = []
    edges: list[tuple[int, int]] = []
    start_key: list[tuple[int, int]] = []
    end_key: list[tuple[int, int]] = []

    def add_road(a, b, road_type, oneway):
        (lon_a, lat_a), (lon_b, lat_b) = point(*a), point(*b)
        roads.append(RoadRecord(
            id=len(roads),
            start_lon=lon_a, start_lat=lat_a, end_lon=lon_b, end_lat=lat_b,
            road_type=road_type,
            length=max(1.0, haversine(lat_a, lon_a, lat_b, lon_b)),
            lanes=LANES_BY_TYPE[road_type],
            oneway=oneway,
        ))
        start_key.append(a)
        end_key.append(b)

    def street_type(along_row: bool, index: int) -> str:
        center = rows // 2 if along_row else cols // 2
        if index == center:
            return "primary"
        if index % 3 == 0:
            return "tertiary"
        return "residential"

    for r in range(rows):
        t = street_type(True, r)
        for c in range(cols - 1):
            add_road((r, c), (r, c + 1), t, False)
            add_road((r, c + 1), (r, c), t, False)
    for c in range(cols):
        t = street_type(False, c)
        for r in range(rows - 1):
            add_road((r, c), (r + 1, c), t, False)
            add_road((r + 1, c), (r, c), t, False)

    for k in range(1, ring_count + 1):
        top, left = k, k
        bottom, right = rows - 1 - k, cols - 1 - k
        if bottom <= top or right <= left:
            break  # ring does not fit inside the grid
        perimeter = (
            [(top, c) for c in range(left, right + 1)]
            + [(r, right) for r in range(top + 1, bottom + 1)]
            + [(bottom, c) for c in range(right - 1, left - 1, -1)]
            + [(r, left) for r in range(bottom - 1, top, -1)]
        )
        for a, b in zip(perimeter, perimeter[1:] + perimeter[:1]):
            add_road(a, b, "trunk", True)

    # connectivity: consecutive traversal shares an intersection (u-turns
    # onto the reverse carriageway included)
    by_start: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(start_key):
        by_start.setdefault(key, []).append(i)
    for i in range(len(roads)):
        for j in by_start.get(end_key[i], ()):
            if i != j:
                edges.append((i, j))

    return RoadNetwork(
        roads=roads,
        edges=edges,
        adjacency=_build_adjacency(len(roads), edges),
        orig_ids=list(range(len(roads))),
        id_map={i: i for i in range(len(roads))},
    )


@dataclass
class TemporalProfile:
    """Hour-of-day start intensities, split by day kind."""

    weekday_hours: np.ndarray
    weekend_hours: np.ndarray
    weekend_prob: float = 2.0 / 7.0

    def __post_init__(self):
        self.weekday_hours = np.asarray(self.weekday_hours, dtype=np.float64)
        self.weekend_hours = np.asarray(self.weekend_hours, dtype=np.float64)
        for w in (self.weekday_hours, self.weekend_hours):
            if w.shape != (24,) or w.sum() <= 0:
                raise ValueError("hour weights must be 24 non-negative values with positive sum")

    @staticmethod
    def default() -> "TemporalProfile":
        weekday = np.ones(24)
        weekday[[7, 8, 9]] += [4, 8, 4]
        weekday[[17, 18, 19]] += [3, 6, 3]
        weekend = np.ones(24)
        weekend[[13, 14, 15]] += [4, 6, 4]
        return TemporalProfile(weekday, weekend)


_EPOCH_MONDAY = 1609718400  # a Monday 00:00 UTC


def _flat_coords(network: RoadNetwork) -> np.ndarray:
    """Centroid coordinates where euclidean distance tracks real distance."""
    lat = np.array([r.centroid_lat for r in network.roads])
    lon = np.array([r.centroid_lon for r in network.roads])
    return np.stack([lat, lon * np.cos(np.radians(lat.mean()))], axis=1)


def _road_ends(network: RoadNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Flat start/end points per road (same projection as _flat_coords)."""
    lat = np.array([r.centroid_lat for r in network.roads])
    scale = np.cos(np.radians(lat.mean()))
    starts = np.array([[r.start_lat, r.start_lon * scale] for r in network.roads])
    ends = np.array([[r.end_lat, r.end_lon * scale] for r in network.roads])
    return starts, ends


def trip_hubs(network: RoadNetwork, count: int) -> np.ndarray:
    """Trip target intersections: a ring of points around the city center."""
    starts, ends = _road_ends(network)
    points = np.vstack([starts, ends])
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = (lo + hi) / 2.0
    radius = 0.3 * (hi - lo)
    angles = 2 * np.pi * np.arange(count) / count
    anchors = center + radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    hubs = []
    for anchor in anchors:
        gaps = ((ends - anchor) ** 2).sum(axis=1)
        hubs.append(ends[int(gaps.argmin())])
    return np.array(hubs)


def origin_zone(coords: np.ndarray, road: int, n_zones: int) -> int:
    """Sector of the city a road sits in (angular split around the center)."""
    center = (coords.min(axis=0) + coords.max(axis=0)) / 2.0
    d = coords[road] - center
    angle = np.arctan2(d[0], d[1]) + np.pi
    return min(int(angle / (2 * np.pi) * n_zones), n_zones - 1)


def _turn_code(dir_in: np.ndarray, dir_out: np.ndarray) -> float:
    """Signed turn angle in degrees; 0 straight, positive left."""
    a_in = np.arctan2(dir_in[0], dir_in[1])
    a_out = np.arctan2(dir_out[0], dir_out[1])
    return float(np.degrees((a_out - a_in + np.pi) % (2 * np.pi) - np.pi))


def simulate_trajectories(network: RoadNetwork, count: int, seed: int,
                          profile: TemporalProfile | None = None,
                          hub_count: int = 3,
                          greedy_noise: float = 1.0) -> list[Trajectory]:
    """Seeded random walks with profile-driven start times.

    By default (``greedy_noise=1.0``) walks are uniform over
    adjacency-respecting turns with lengths uniform in [10, 100]. Lower
    noise switches to commute-style trips: the origin sector fixes a hub
    intersection and the exit turn taken there, the walk heads for the
    hub's canonical entry and ends just after the turn (chaining below
    10 roads, truncating at 100). Entry timestamps accumulate per-road
    traversal times from the deterministic speed model, so durations and
    per-road mean speeds are learnable from the output.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if network.adjacency.nnz == 0:
        raise ValueError("network has no edges")
    profile = profile or TemporalProfile.default()
    rng = np.random.default_rng(seed)

    starts = np.flatnonzero(np.diff(network.adjacency.indptr) > 0)
    wd = profile.weekday_hours / profile.weekday_hours.sum()
    we = profile.weekend_hours / profile.weekend_hours.sum()

    coords = _flat_coords(network)
    p_start, p_end = _road_ends(network)
    directions = p_end - p_start
    hubs = trip_hubs(network, hub_count)
    n_zones = 4 * hub_count
    segment = float(np.median(np.linalg.norm(directions, axis=1)))
    arrive_tol = (0.3 * segment) ** 2
    turn_angles = (0.0, 90.0, -90.0, 180.0)  # straight, left, right, back

    center = (np.vstack([p_start, p_end]).min(axis=0)
              + np.vstack([p_start, p_end]).max(axis=0)) / 2.0
    # canonical center-side entry road per hub: every trip funnels through it
    entry_roads = []
    for hub in hubs:
        ends_here = np.flatnonzero(((p_end - hub) ** 2).sum(axis=1) < arrive_tol)
        gaps = ((p_start[ends_here] - center) ** 2).sum(axis=1)
        entry_roads.append(int(ends_here[gaps.argmin()]))

    def final_turn(current: int, options: np.ndarray, wanted: float) -> int:
        turns = np.array([_turn_code(directions[current], directions[o]) for o in options])
        spread = np.abs((turns - wanted + 180.0) % 360.0 - 180.0)
        return int(options[spread.argmin()])

    # cross-town: a sector's hub sits on the far side of the ring
    hub_angles = 2 * np.pi * np.arange(hub_count) / hub_count
    zone_centers = 2 * np.pi * (np.arange(n_zones) + 0.5) / n_zones - np.pi
    zone_hub = np.array([
        int(np.argmin(np.abs((hub_angles - (zc + np.pi) + np.pi) % (2 * np.pi) - np.pi)))
        for zc in zone_centers
    ])

    uniform_walks = greedy_noise >= 1.0

    out: list[Trajectory] = []
    for _ in range(count):
        road = int(rng.choice(starts))
        zone = origin_zone(coords, road, n_zones)
        # neighboring sectors share a hub but cycle through exit turns
        entry = entry_roads[zone_hub[zone]]
        wanted = turn_angles[zone % 4]
        target_len = int(rng.integers(10, 101)) if uniform_walks else 100
        weekend = bool(rng.random() < profile.weekend_prob)
        day = int(rng.integers(5, 7) if weekend else rng.integers(0, 5))
        hour = int(rng.choice(24, p=we if weekend else wd))
        week = int(rng.integers(0, 4))
        ts = _EPOCH_MONDAY + week * 7 * 86400 + day * 86400 + hour * 3600 + int(rng.integers(0, 3600))

        roads = [road]
        times = [ts]

        def advance(nxt: int, weekend=weekend):
            hour_now = (times[-1] // 3600) % 24
            times.append(times[-1] + traversal_seconds(
                network.roads[roads[-1]], int(hour_now), weekend))
            roads.append(nxt)

        while len(roads) < target_len:
            options = network.out_neighbors(roads[-1])
            if options.size == 0:
                break
            if not uniform_walks and roads[-1] == entry:
                advance(final_turn(roads[-1], options, wanted))
                if len(roads) >= 10:
                    break
                zone = int(rng.integers(0, n_zones))  # chain a short trip onward
                entry = entry_roads[zone_hub[zone]]
                wanted = turn_angles[zone % 4]
                continue
            if rng.random() < greedy_noise:
                advance(int(options[rng.integers(0, options.size)]))
            else:
                target = p_start[entry]
                if ((p_end[roads[-1]] - target) ** 2).sum() < arrive_tol \
                        and entry in options:
                    advance(entry)
                    continue
                gaps = ((p_end[options] - target) ** 2).sum(axis=1)
                best = np.flatnonzero(gaps == gaps.min())
                advance(int(options[best[rng.integers(0, best.size)]]))
        out.append(Trajectory(roads, times))
    return out
