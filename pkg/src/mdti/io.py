"""Dataset directory I/O: ``dataset.jsonl``, ``network.json``, ``grid.json``,
``splits.json``."""
from __future__ import annotations

import json
from pathlib import Path

from .trajectory import (
    GpsTrajectory,
    GridSpec,
    GridTrajectory,
    RoadNetwork,
    RoadSegment,
    RoadTrajectory,
    RoadType,
    TrajectorySample,
)

DATASET_FILE = "dataset.jsonl"
NETWORK_FILE = "network.json"
GRID_FILE = "grid.json"
SPLITS_FILE = "splits.json"


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def sample_to_record(s: TrajectorySample) -> dict:
    return {
        "id": s.id,
        "gps": [[p.lon, p.lat, p.t] for p in s.gps.points],
        "grid": list(s.grid.cells),
        "road": {"segs": list(s.road.segments), "ts": list(s.road.timestamps)},
        "tt_min": s.travel_time,
    }


def record_to_sample(rec: dict) -> TrajectorySample:
    return TrajectorySample(
        id=rec["id"],
        gps=GpsTrajectory.from_array(rec["gps"]),
        grid=GridTrajectory([int(c) for c in rec["grid"]]),
        road=RoadTrajectory([int(v) for v in rec["road"]["segs"]], [int(t) for t in rec["road"]["ts"]]),
        travel_time=float(rec["tt_min"]),
    )


def network_to_dict(net: RoadNetwork) -> dict:
    return {
        "segments": [
            {"id": s.id, "polyline": [list(p) for p in s.polyline], "type": s.type.name.lower(), "length_m": s.length_m}
            for s in net.segments
        ],
        "edges": [list(e) for e in net.edges],
    }


def network_from_dict(d: dict) -> RoadNetwork:
    segments = [
        RoadSegment(int(s["id"]), [tuple(p) for p in s["polyline"]], RoadType[s["type"].upper()], float(s["length_m"]))
        for s in d["segments"]
    ]
    return RoadNetwork(segments, [(int(a), int(b)) for a, b in d["edges"]])


def write_samples(path: Path, samples) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(_dumps(sample_to_record(s)) + "\n")


def read_samples(path: Path) -> list[TrajectorySample]:
    with open(path, encoding="utf-8") as fh:
        return [record_to_sample(json.loads(line)) for line in fh if line.strip()]


def write_dataset(out_dir, samples, net: RoadNetwork, spec: GridSpec, splits: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_samples(out / DATASET_FILE, samples)
    (out / NETWORK_FILE).write_text(_dumps(network_to_dict(net)) + "\n", encoding="utf-8")
    grid = {"bbox": list(spec.bbox), "rows": spec.rows, "cols": spec.cols}
    (out / GRID_FILE).write_text(_dumps(grid) + "\n", encoding="utf-8")
    if splits is not None:
        (out / SPLITS_FILE).write_text(_dumps(splits) + "\n", encoding="utf-8")
    return out


class Dataset:
    """A dataset directory loaded into memory."""

    def __init__(self, samples, net: RoadNetwork, spec: GridSpec, splits: dict | None = None, root=None):
        self.samples = samples
        self.net = net
        self.spec = spec
        self.splits = splits
        self.root = root
        self._by_id = {s.id: s for s in samples}

    def split(self, name: str) -> list[TrajectorySample]:
        if self.splits is None:
            raise KeyError("dataset has no split file")
        return [self._by_id[i] for i in self.splits[name]]


def read_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    samples = read_samples(root / DATASET_FILE)
    net = network_from_dict(json.loads((root / NETWORK_FILE).read_text(encoding="utf-8")))
    g = json.loads((root / GRID_FILE).read_text(encoding="utf-8"))
    spec = GridSpec(tuple(g["bbox"]), int(g["rows"]), int(g["cols"]))
    splits_path = root / SPLITS_FILE
    splits = json.loads(splits_path.read_text(encoding="utf-8")) if splits_path.exists() else None
    return Dataset(samples, net, spec, splits, root)
