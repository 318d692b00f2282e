"""Synthetic city: a lattice road network and trips driven along it.

Each trip is a non-backtracking walk over the lattice driven at a
piecewise-constant speed (one speed per segment, depending on road type, time
of day and a random factor). GPS fixes are emitted at a jittered fixed
interval with Gaussian position noise; the driven segment sequence is kept as
the ground-truth road trajectory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trajectory import (
    GpsTrajectory,
    GridSpec,
    RoadNetwork,
    RoadSegment,
    RoadTrajectory,
    RoadType,
    TrajectorySample,
    discretize,
    local_projection,
)

BASE_EPOCH = 1_699_833_600  # Monday 2023-11-13 00:00 UTC
TYPE_SPEED = {RoadType.ARTERIAL: 16.0, RoadType.COLLECTOR: 12.0, RoadType.LOCAL: 9.0, RoadType.RAMP: 13.0}
JUNCTION_CLEARANCE_M = 0.5
MAX_ATTEMPTS = 200


@dataclass
class GeneratorConfig:
    bbox: tuple[float, float, float, float] = (104.04, 30.65, 104.10, 30.70)
    rows: int = 32
    cols: int = 32
    lattice_rows: int = 6
    lattice_cols: int = 6
    trips: int = 256
    min_segments: int = 3
    max_segments: int = 12
    # exact GPS point counts to draw from; overrides the segment-count range
    lengths: list[int] | None = None
    speed_min: float = 4.0
    speed_max: float = 20.0
    interval_s: int = 15
    interval_jitter_s: int = 3
    noise_m: float = 10.0
    ramp_fraction: float = 0.1
    margin: float = 0.05

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.lattice_rows < 2 or self.lattice_cols < 2:
            raise ValueError("lattice needs at least 2x2 intersections")
        if self.trips < 1 or self.min_segments < 2 or self.max_segments < self.min_segments:
            raise ValueError("invalid trip / segment-count settings")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("invalid speed range")
        if self.interval_s - self.interval_jitter_s < 1:
            raise ValueError("sampling interval must stay >= 1 s after jitter")
        if self.lengths is not None and min(self.lengths) < 3:
            raise ValueError("trajectory lengths must be >= 3 points")


def day_of_week(ts: float) -> int:
    return int((ts // 86400 + 3) % 7)  # 1970-01-01 was a Thursday


def minute_of_day(ts: float) -> int:
    return int((ts % 86400) // 60)


def time_of_day_factor(ts: float) -> float:
    hour = minute_of_day(ts) // 60
    if hour in (7, 8, 17, 18):
        return 0.6
    if hour < 6:
        return 1.2
    return 1.1 if day_of_week(ts) >= 5 else 1.0


def build_lattice(cfg: GeneratorConfig, rng: np.random.Generator):
    """Lattice network, node coordinates ``[R, C, 2]`` (lon, lat) and the
    ``(node, node)`` endpoints of every segment."""
    lon0, lat0, lon1, lat1 = cfg.bbox
    mx, my = (lon1 - lon0) * cfg.margin, (lat1 - lat0) * cfg.margin
    lons = np.linspace(lon0 + mx, lon1 - mx, cfg.lattice_cols)
    lats = np.linspace(lat0 + my, lat1 - my, cfg.lattice_rows)
    nodes = np.stack(np.meshgrid(lons, lats), axis=-1)  # [R, C, 2]
    project = local_projection(((lon0 + lon1) / 2, (lat0 + lat1) / 2))
    R, C = cfg.lattice_rows, cfg.lattice_cols

    ends: list[tuple[tuple[int, int], tuple[int, int]]] = []
    types: list[RoadType] = []
    for r in range(R):
        for c in range(C - 1):
            ends.append(((r, c), (r, c + 1)))
            types.append(RoadType.ARTERIAL if r in (0, R - 1) else RoadType.COLLECTOR if r == R // 2 else RoadType.LOCAL)
    for c in range(C):
        for r in range(R - 1):
            ends.append(((r, c), (r + 1, c)))
            types.append(RoadType.ARTERIAL if c in (0, C - 1) else RoadType.COLLECTOR if c == C // 2 else RoadType.LOCAL)
    local = [i for i, t in enumerate(types) if t == RoadType.LOCAL]
    n_ramps = min(len(local), int(round(cfg.ramp_fraction * len(ends))))
    for i in rng.choice(local, size=n_ramps, replace=False) if n_ramps else []:
        types[int(i)] = RoadType.RAMP

    segments = []
    for i, (a, b) in enumerate(ends):
        pa, pb = nodes[a], nodes[b]
        x, y = project([pa[0], pb[0]], [pa[1], pb[1]])
        length = float(math.hypot(x[1] - x[0], y[1] - y[0]))
        segments.append(RoadSegment(i, [(float(pa[0]), float(pa[1])), (float(pb[0]), float(pb[1]))], types[i], length))

    incident: dict[tuple[int, int], list[int]] = {}
    for i, (a, b) in enumerate(ends):
        incident.setdefault(a, []).append(i)
        incident.setdefault(b, []).append(i)
    edges = sorted({(i, j) for segs in incident.values() for i in segs for j in segs if i != j})
    return RoadNetwork(segments, edges), nodes, ends


def _simulate_trip(cfg, net, nodes, ends, incident, project, rng):
    seg = int(rng.integers(len(net)))
    a, b = ends[seg] if rng.random() < 0.5 else ends[seg][::-1]
    t0 = BASE_EPOCH + int(rng.integers(0, 7 * 86400))
    n_target = int(rng.choice(cfg.lengths)) if cfg.lengths else None
    n_segs = None if n_target else int(rng.integers(cfg.min_segments, cfg.max_segments + 1))

    def xy(node):
        return np.array(project(nodes[node][0], nodes[node][1]))

    # legs: (segment id, start xy, unit direction, start offset, end offset, speed, enter time)
    legs = []
    t = float(t0)
    offset = float(rng.uniform(0.2, 0.8)) * net.segments[seg].length_m
    horizon = None if n_segs else t0 + n_target * (cfg.interval_s + cfg.interval_jitter_s) + 60
    while True:
        length = net.segments[seg].length_m
        last = n_segs is not None and len(legs) == n_segs - 1
        end = float(rng.uniform(0.2, 0.8)) * length if last else length
        speed = TYPE_SPEED[net.segments[seg].type] * time_of_day_factor(t) * float(rng.uniform(0.8, 1.2))
        speed = min(max(speed, cfg.speed_min), cfg.speed_max)
        pa, pb = xy(a), xy(b)
        legs.append((seg, pa, (pb - pa) / length, offset, end, speed, t))
        t += (end - offset) / speed
        if last or (horizon is not None and t > horizon):
            break
        options = [s for s in incident[b] if s != seg]
        seg = int(options[rng.integers(len(options))])
        sa, sb = ends[seg]
        a, b = (sa, sb) if sa == b else (sb, sa)
        offset = 0.0
    arrival = t

    times = [t0]
    while True:
        nxt = times[-1] + cfg.interval_s + int(rng.integers(-cfg.interval_jitter_s, cfg.interval_jitter_s + 1))
        if n_target is not None:
            if len(times) == n_target:
                break
        elif nxt >= arrival:
            if times[-1] < arrival:
                times.append(math.ceil(arrival))
            break
        times.append(nxt)

    enter = np.array([leg[6] for leg in legs])
    xs, ys, owner = [], [], []
    for tt in times:
        k = int(np.searchsorted(enter, min(tt, arrival), side="right") - 1)
        seg_id, pa, unit, off, end, speed, t_in = legs[k]
        along = min(off + (min(tt, arrival) - t_in) * speed, end)
        length = net.segments[seg_id].length_m
        if along < JUNCTION_CLEARANCE_M or along > length - JUNCTION_CLEARANCE_M:
            return None
        pos = pa + unit * along
        xs.append(pos[0]); ys.append(pos[1]); owner.append(seg_id)

    visited = _collapse(owner)
    driven = [leg[0] for leg in legs]
    if visited != driven[:len(visited)] or (n_target is None and len(visited) != len(driven)):
        return None  # a driven segment received no fix

    xs = np.array(xs) + rng.normal(0.0, cfg.noise_m, len(xs)) if cfg.noise_m > 0 else np.array(xs)
    ys = np.array(ys) + rng.normal(0.0, cfg.noise_m, len(ys)) if cfg.noise_m > 0 else np.array(ys)
    lon, lat = project.inverse(xs, ys)
    lon0, lat0, lon1, lat1 = cfg.bbox
    lon, lat = np.clip(lon, lon0, lon1), np.clip(lat, lat0, lat1)
    gps = GpsTrajectory.from_array(np.column_stack([lon, lat, np.array(times, dtype=np.float64)]))

    segs, ts = [], []
    for s, tt in zip(owner, times):
        if not segs or segs[-1] != s:
            segs.append(s); ts.append(int(tt))
    return gps, RoadTrajectory(segs, ts), (times[-1] - times[0]) / 60.0


def _collapse(seq):
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out


def generate_synthetic(cfg: GeneratorConfig, seed: int):
    """Generate ``cfg.trips`` samples plus the network and grid they live on.

    Deterministic given ``seed``; trip ``i`` draws from its own stream seeded
    by ``(seed, i)``.
    """
    net, nodes, ends = build_lattice(cfg, np.random.default_rng([seed, 2**31 - 1]))
    incident: dict = {}
    for i, (a, b) in enumerate(ends):
        incident.setdefault(a, []).append(i)
        incident.setdefault(b, []).append(i)
    spec = GridSpec(cfg.bbox, cfg.rows, cfg.cols)
    lon0, lat0, lon1, lat1 = cfg.bbox
    project = local_projection(((lon0 + lon1) / 2, (lat0 + lat1) / 2))
    samples = []
    for i in range(cfg.trips):
        rng = np.random.default_rng([seed, i])
        for _ in range(MAX_ATTEMPTS):
            trip = _simulate_trip(cfg, net, nodes, ends, incident, project, rng)
            if trip is not None:
                break
        else:
            raise RuntimeError(f"trip {i}: no valid walk after {MAX_ATTEMPTS} attempts; check the config")
        gps, road, tt = trip
        samples.append(TrajectorySample(f"trip-{i:06d}", gps, discretize(gps, spec), road, tt))
    return samples, net, spec
