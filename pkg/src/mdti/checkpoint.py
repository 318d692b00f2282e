"""Checkpoint directories: a JSON manifest plus a raw little-endian float32 payload.

The manifest lists every tensor with its shape and byte range, the training
config and the GPS pattern library, so a checkpoint is self-describing and
a save -> load -> save cycle reproduces both files byte for byte.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointError

MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
FORMAT = "mdti-checkpoint/1"
DTYPE = "<f4"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # float32
    config: dict
    pattern_library: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module, config: dict, pattern_library=None, extra=None) -> "Checkpoint":
        tensors = {}
        for name, t in module.state_dict().items():
            if not t.is_floating_point():
                raise CheckpointError(f"tensor {name} has non-float dtype {t.dtype}")
            tensors[name] = t.detach().cpu().to(torch.float32).numpy().copy()
        lib = None if pattern_library is None else np.asarray(pattern_library, dtype=np.float64)
        return cls(tensors, config, lib, dict(extra or {}))

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _manifest(ckpt: Checkpoint) -> tuple[dict, bytes]:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=DTYPE)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    lib = None if ckpt.pattern_library is None else ckpt.pattern_library.tolist()
    manifest = {
        "format": FORMAT,
        "byteorder": "little",
        "payload_bytes": offset,
        "tensors": entries,
        "config": ckpt.config,
        "pattern_library": lib,
        "extra": ckpt.extra,
    }
    return manifest, b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, payload = _manifest(ckpt)
    (out / PAYLOAD).write_bytes(payload)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
        payload = (root / PAYLOAD).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint at {root}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{root}: unsupported checkpoint format {manifest.get('format')!r}")
    if manifest["payload_bytes"] != len(payload):
        raise CheckpointError(
            f"{root}: manifest accounts for {manifest['payload_bytes']} bytes, payload has {len(payload)}"
        )
    tensors, expected = {}, 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != expected or e["nbytes"] != 4 * n:
            raise CheckpointError(f"{root}: inconsistent byte range for tensor {e['name']}")
        arr = np.frombuffer(payload, dtype=DTYPE, count=n, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
        expected += e["nbytes"]
    lib = manifest.get("pattern_library")
    return Checkpoint(
        tensors,
        manifest["config"],
        None if lib is None else np.asarray(lib, dtype=np.float64),
        manifest.get("extra", {}),
    )


def load_into(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``tensors`` into ``module``; any name or shape disagreement raises, listing every offender."""
    state = module.state_dict()
    problems = []
    for name in sorted(set(state) | set(tensors)):
        if name not in tensors:
            problems.append(f"{name}: missing from checkpoint")
        elif name not in state:
            problems.append(f"{name}: not a parameter of the model")
        elif tuple(state[name].shape) != tuple(tensors[name].shape):
            problems.append(f"{name}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(state[name].shape)}")
    if problems:
        raise CheckpointError("checkpoint is incompatible with the model:\n  " + "\n  ".join(problems))
    module.load_state_dict(
        {k: torch.as_tensor(np.array(v)).to(state[k].dtype) for k, v in tensors.items()}, strict=True
    )


def tensor_checksum(tensors: dict[str, Tensor | np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, Tensor) else t
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
