"""Trajectory data model, grid discretisation, nearest-segment map matching and
dataset splitting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import OutOfBoundsError

EARTH_RADIUS_M = 6_371_008.8


class RoadType(IntEnum):
    ARTERIAL = 0
    COLLECTOR = 1
    LOCAL = 2
    RAMP = 3


N_ROAD_TYPES = len(RoadType)


@dataclass(frozen=True)
class GpsPoint:
    lon: float
    lat: float
    t: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"coordinates out of range: {self.lon}, {self.lat}")
        if not math.isfinite(self.t):
            raise ValueError("timestamp must be finite")


@dataclass
class GpsTrajectory:
    points: list[GpsPoint]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("a GPS trajectory needs at least two points")
        ts = [p.t for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("GPS timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.points)

    def array(self) -> np.ndarray:
        """``[T, 3]`` array of (lon, lat, t)."""
        return np.array([(p.lon, p.lat, p.t) for p in self.points], dtype=np.float64)

    @classmethod
    def from_array(cls, rows) -> "GpsTrajectory":
        return cls([GpsPoint(float(a), float(b), float(c)) for a, b, c in rows])


@dataclass(frozen=True)
class GridSpec:
    bbox: tuple[float, float, float, float]  # lon_min, lat_min, lon_max, lat_max
    rows: int
    cols: int

    def __post_init__(self):
        lon0, lat0, lon1, lat1 = self.bbox
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if not (lon1 > lon0 and lat1 > lat0):
            raise ValueError(f"degenerate bbox {self.bbox}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_center(self, cell: int) -> tuple[float, float]:
        lon0, lat0, lon1, lat1 = self.bbox
        row, col = divmod(cell, self.cols)
        return (
            lon0 + (col + 0.5) * (lon1 - lon0) / self.cols,
            lat0 + (row + 0.5) * (lat1 - lat0) / self.rows,
        )

    def neighbors(self, cell: int) -> list[int]:
        """In-bounds 8-neighbourhood of ``cell`` (excluding itself)."""
        row, col = divmod(cell, self.cols)
        out = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = row + dr, col + dc
                if (dr or dc) and 0 <= r < self.rows and 0 <= c < self.cols:
                    out.append(r * self.cols + c)
        return out


@dataclass
class GridTrajectory:
    cells: list[int]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass
class RoadSegment:
    id: int
    polyline: list[tuple[float, float]]  # (lon, lat) vertices
    type: RoadType
    length_m: float


@dataclass
class RoadNetwork:
    segments: list[RoadSegment]
    edges: list[tuple[int, int]]
    _geometry: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for i, seg in enumerate(self.segments):
            if seg.id != i:
                raise ValueError(f"segment ids must be dense; position {i} holds id {seg.id}")
        n = len(self.segments)
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a missing segment")

    def __len__(self) -> int:
        return len(self.segments)

    def types(self) -> np.ndarray:
        return np.array([int(s.type) for s in self.segments], dtype=np.int64)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges))

    def center(self) -> tuple[float, float]:
        pts = np.array([p for s in self.segments for p in s.polyline])
        return (float(pts[:, 0].min() + pts[:, 0].max()) / 2, float(pts[:, 1].min() + pts[:, 1].max()) / 2)


@dataclass
class RoadTrajectory:
    segments: list[int]
    timestamps: list[int]

    def __post_init__(self):
        if len(self.segments) != len(self.timestamps):
            raise ValueError("road segments and timestamps must align")

    def __len__(self) -> int:
        return len(self.segments)

    def disconnected_pairs(self, net: RoadNetwork) -> list[int]:
        """Indices ``t`` where ``segments[t] -> segments[t+1]`` is not an edge."""
        edges = net.edge_set()
        return [
            i
            for i, (a, b) in enumerate(zip(self.segments, self.segments[1:]))
            if a != b and (a, b) not in edges
        ]


@dataclass
class TrajectorySample:
    id: str
    gps: GpsTrajectory
    grid: GridTrajectory
    road: RoadTrajectory
    travel_time: float  # minutes

    def __post_init__(self):
        if not self.travel_time > 0:
            raise ValueError(f"sample {self.id}: travel time must be positive")


# -- geometry -----------------------------------------------------------------

def local_projection(center: tuple[float, float]):
    """Equirectangular projection about ``center``; returns lon/lat -> metres."""
    lon0, lat0 = center
    kx = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.pi / 180.0
    ky = EARTH_RADIUS_M * math.pi / 180.0

    def project(lon, lat):
        return (np.asarray(lon, dtype=np.float64) - lon0) * kx, (np.asarray(lat, dtype=np.float64) - lat0) * ky

    def unproject(x, y):
        return np.asarray(x) / kx + lon0, np.asarray(y) / ky + lat0

    project.inverse = unproject
    return project


def point_speeds(gps: np.ndarray, center: tuple[float, float]) -> np.ndarray:
    """Per-point speed in m/s from consecutive displacements; point 0 copies point 1."""
    x, y = local_projection(center)(gps[:, 0], gps[:, 1])
    d = np.hypot(np.diff(x), np.diff(y))
    v = d / np.diff(gps[:, 2])
    return np.concatenate([v[:1], v])


# -- operations ---------------------------------------------------------------

POSITION_OCTAVES = 4
N_POSITION_FEATURES = 4 * POSITION_OCTAVES


def position_features(xy: np.ndarray, octaves: int = POSITION_OCTAVES) -> np.ndarray:
    """``sin``/``cos`` of ``2^j * pi * u`` for each of two coordinates ``u`` in [0, 1]."""
    xy = np.asarray(xy, dtype=np.float64)
    ang = xy[:, :, None] * (np.pi * 2.0 ** np.arange(octaves))  # [n, 2, octaves]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(xy), -1)


def discretize(gps: GpsTrajectory | np.ndarray, spec: GridSpec) -> GridTrajectory:
    """Map each GPS point to ``row * cols + col``; maxima clamp into the last cell."""
    arr = gps.array() if isinstance(gps, GpsTrajectory) else np.asarray(gps, dtype=np.float64)
    lon0, lat0, lon1, lat1 = spec.bbox
    lon, lat = arr[:, 0], arr[:, 1]
    outside = (lon < lon0) | (lon > lon1) | (lat < lat0) | (lat > lat1)
    if outside.any():
        i = int(np.argmax(outside))
        raise OutOfBoundsError(i, arr[i, :2])
    col = np.floor((lon - lon0) / ((lon1 - lon0) / spec.cols)).astype(np.int64)
    row = np.floor((lat - lat0) / ((lat1 - lat0) / spec.rows)).astype(np.int64)
    col = np.minimum(col, spec.cols - 1)
    row = np.minimum(row, spec.rows - 1)
    return GridTrajectory((row * spec.cols + col).tolist())


def _network_geometry(net: RoadNetwork):
    if net._geometry is None:
        project = local_projection(net.center())
        owner, ax, ay, bx, by = [], [], [], [], []
        for seg in net.segments:
            xs, ys = project([p[0] for p in seg.polyline], [p[1] for p in seg.polyline])
            if len(xs) == 1:
                xs, ys = np.repeat(xs, 2), np.repeat(ys, 2)
            owner.extend([seg.id] * (len(xs) - 1))
            ax.extend(xs[:-1]); ay.extend(ys[:-1]); bx.extend(xs[1:]); by.extend(ys[1:])
        net._geometry = (project, np.array(owner), *(np.array(v) for v in (ax, ay, bx, by)))
    return net._geometry


def segment_distances(lon: float, lat: float, net: RoadNetwork) -> np.ndarray:
    """Euclidean distance (m) from a point to every segment polyline."""
    project, owner, ax, ay, bx, by = _network_geometry(net)
    px, py = project(lon, lat)
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.where(denom > 0, ((px - ax) * dx + (py - ay) * dy) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d = np.hypot(ax + t * dx - px, ay + t * dy - py)
    out = np.full(len(net), np.inf)
    np.minimum.at(out, owner, d)
    return out


def map_match_nearest(gps: GpsTrajectory, net: RoadNetwork) -> RoadTrajectory:
    """Snap every point to its nearest segment and collapse consecutive repeats.

    Ties go to the lower segment id. Each kept segment carries the timestamp of
    the first point matched to it. The result is not guaranteed to respect
    network connectivity; see :meth:`RoadTrajectory.disconnected_pairs`.
    """
    if len(net) == 0:
        raise ValueError("cannot map-match against an empty network")
    segs: list[int] = []
    ts: list[int] = []
    for p in gps.points:
        best = int(np.argmin(segment_distances(p.lon, p.lat, net)))
        if not segs or segs[-1] != best:
            segs.append(best)
            ts.append(int(p.t))
    return RoadTrajectory(segs, ts)


def split_dataset(samples: Sequence, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded shuffle then contiguous train/val/test split.

    Val and test sizes are ``floor(n * ratio)``; the remainder goes to train.
    """
    if len(samples) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    pick = [samples[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


def truncate_sample(sample: TrajectorySample, n: int, keep: str = "prefix") -> TrajectorySample:
    """Clip a sample to ``n`` GPS points, as a fixed-length pipeline would.

    The grid trajectory is clipped with the points it came from. Road segments
    are kept if the vehicle was on them during the retained time window. The
    travel-time label is left untouched: the clipped sample still describes
    the whole trip.
    """
    if keep not in ("prefix", "suffix"):
        raise ValueError(f"keep must be 'prefix' or 'suffix', got {keep!r}")
    if n < 2:
        raise ValueError("a truncated trajectory needs at least two points")
    if len(sample.gps) <= n:
        return sample
    sl = slice(None, n) if keep == "prefix" else slice(-n, None)
    points = sample.gps.points[sl]
    t0, t1 = points[0].t, points[-1].t
    ts = np.asarray(sample.road.timestamps, dtype=np.float64)
    # segment i is occupied over [ts[i], ts[i+1]); keep those overlapping [t0, t1]
    ends = np.append(ts[1:], np.inf)
    keep_seg = (ts <= t1) & (ends > t0)
    segs = [s for s, k in zip(sample.road.segments, keep_seg) if k]
    stamps = [max(int(t), int(t0)) for t, k in zip(sample.road.timestamps, keep_seg) if k]
    return TrajectorySample(
        sample.id,
        GpsTrajectory(list(points)),
        GridTrajectory(sample.grid.cells[sl]),
        RoadTrajectory(segs, stamps),
        sample.travel_time,
    )
