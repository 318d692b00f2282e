"""Full encoder assembly, feature preparation and batching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .fusion import FusionAlign
from .gps_encoder import GpsSemanticEncoder
from .grid_encoder import GridEncoder, GridInputs, collate_grid, grid_inputs, time_slots
from .interactor import Interactor
from .nn import EncoderLayer
from .objectives import MlmBatch, Temperature, TTEHead, info_nce, masked_nll, total_loss
from .road_encoder import (
    RoadEncoder,
    collate_road,
    road_adjacency,
    road_node_features,
    sequence_inputs,
    sinusoidal_encoding,
    standardize_columns,
)
from .trajectory import GridSpec, RoadNetwork, RoadTrajectory, TrajectorySample


@dataclass
class ModelConfig:
    dim: int = 256
    heads: int = 4
    road_layers: int = 4
    grid_layers: int = 2
    gat_heads: int = 4
    grid_gat_dim: int = 64
    dropout: float = 0.1
    segments: int = 16
    d_lm: int = 256
    max_offset: int = 8
    ffn_mult: int = 4


@dataclass
class SampleFeatures:
    id: str
    grid: GridInputs
    gps: np.ndarray  # [n_chunks, d_lm]
    road: RoadTrajectory
    label: float
    slots: np.ndarray  # [L] grid row (1..T) sharing each road token's moment


class FeatureBuilder:
    """Turns samples into model-ready arrays, caching by sample id."""

    def __init__(self, spec: GridSpec, net: RoadNetwork, gps: GpsSemanticEncoder, segments: int):
        self.spec = spec
        self.net = net
        self.gps = gps
        self.segments = segments
        self.types = net.types()
        self._cache: dict[str, SampleFeatures] = {}

    def __call__(self, sample: TrajectorySample) -> SampleFeatures:
        hit = self._cache.get(sample.id)
        if hit is None:
            hit = SampleFeatures(
                sample.id,
                grid_inputs(sample, self.spec, self.segments),
                self.gps.encode(sample),
                sample.road,
                sample.travel_time,
                time_slots([p.t for p in sample.gps.points], sample.road.timestamps, self.segments),
            )
            self._cache[sample.id] = hit
        return hit

    def many(self, samples) -> list[SampleFeatures]:
        return [self(s) for s in samples]


def network_tensors(net: RoadNetwork, dtype=torch.float32) -> dict[str, Tensor]:
    return {
        "node_x": torch.as_tensor(standardize_columns(road_node_features(net)), dtype=dtype),
        "node_adj": torch.as_tensor(road_adjacency(net)),
    }


def collate(
    feats: list[SampleFeatures],
    types: np.ndarray,
    masks: list[MlmBatch] | None = None,
    dtype=torch.float32,
) -> dict[str, Tensor]:
    batch = {f"grid_{k}": v for k, v in collate_grid([f.grid for f in feats], dtype).items()}
    d_lm = feats[0].gps.shape[1]
    n = max(1, max(len(f.gps) for f in feats))
    z = torch.zeros(len(feats), n, d_lm, dtype=dtype)
    for i, f in enumerate(feats):
        z[i, : len(f.gps)] = torch.as_tensor(f.gps, dtype=dtype)
    batch["gps"] = z
    batch["gps_len"] = torch.tensor([len(f.gps) for f in feats], dtype=torch.long)
    if masks:
        road = [sequence_inputs(f.road, types, m.mask_positions, masked_seq=m.masked_seq) for f, m in zip(feats, masks)]
    else:
        road = [sequence_inputs(f.road, types) for f in feats]
    batch.update(collate_road(road))
    slot = torch.zeros_like(batch["ids"])
    for i, f in enumerate(feats):
        slot[i, 1 : len(f.slots) + 1] = torch.as_tensor(f.slots)
    batch["road_slot"] = slot
    if masks:
        sel = torch.zeros_like(batch["pad"])
        targets = []
        for i, m in enumerate(masks):
            for p in m.mask_positions:
                sel[i, p + 1] = True
            # boolean indexing walks ``sel`` row-major, i.e. sorted positions per row
            targets.extend(t for _, t in sorted(zip(m.mask_positions, m.targets)))
        batch["mlm_sel"] = sel
        batch["mlm_targets"] = torch.tensor(targets, dtype=torch.long)
    batch["label"] = torch.tensor([f.label for f in feats], dtype=dtype)
    return batch


@dataclass
class Encoded:
    grid: Tensor  # contextualised fused grid sequence [B, T+1, D]
    grid_valid: Tensor  # [B, T+1]
    road: Tensor  # [B, L+1, D]
    road_pad: Tensor  # [B, L+1]
    fused: Tensor  # interactor output [B, L+1, D]
    gps_pad: Tensor  # [B, T]

    @property
    def cls(self) -> Tensor:
        return self.fused[:, 0]


class MDTIEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ffn = cfg.ffn_mult * cfg.dim
        self.grid_encoder = GridEncoder(cfg.dim, cfg.grid_gat_dim, cfg.gat_heads, cfg.dropout)
        self.fusion = FusionAlign(cfg.d_lm, cfg.dim, cfg.segments)
        self.grid_layers = nn.ModuleList(EncoderLayer(cfg.dim, cfg.heads, ffn, cfg.dropout) for _ in range(cfg.grid_layers))
        self.grid_norm = nn.LayerNorm(cfg.dim)
        self.road_encoder = RoadEncoder(cfg.dim, cfg.heads, cfg.road_layers, cfg.gat_heads, cfg.dropout, ffn)
        self.interactor = Interactor(cfg.dim, cfg.heads, cfg.dropout, cfg.max_offset, ffn)

    def encode_grid_side(self, batch) -> tuple[Tensor, Tensor, Tensor]:
        grid = self.grid_encoder(batch["grid_x"], batch["grid_adj"], batch["grid_pool"], batch["grid_empty"])
        fused, gps_pad = self.fusion(grid, batch["gps"], batch["gps_len"])
        valid = torch.cat([torch.ones_like(batch["grid_empty"][:, :1]), ~batch["grid_empty"]], dim=1)
        h = fused + sinusoidal_encoding(fused.shape[1], fused.shape[2], fused.dtype)
        for layer in self.grid_layers:
            h = layer(h, key_mask=valid)
        return self.grid_norm(h), valid, gps_pad

    def forward(self, batch, net_t) -> Encoded:
        grid, valid, gps_pad = self.encode_grid_side(batch)
        road = self.road_encoder(
            batch["ids"], batch["dow"], batch["minute"], batch["type"], batch["pad"], net_t["node_x"], net_t["node_adj"]
        )
        fused = self.interactor(road, grid, valid, q_pos=batch.get("road_slot"))
        return Encoded(grid, valid, road, batch["pad"], fused, gps_pad)


class PretrainModel(nn.Module):
    def __init__(self, cfg: ModelConfig, n_segments: int, tau_init: float = 0.07):
        super().__init__()
        self.encoder = MDTIEncoder(cfg)
        self.mlm_head = nn.Linear(cfg.dim, n_segments)
        self.temperature = Temperature(tau_init)

    def forward(self, batch, net_t, weights=(1.0, 1.0)) -> dict[str, Tensor]:
        enc = self.encoder(batch, net_t)
        l_cl = info_nce(enc.grid[:, 0], enc.road[:, 0], self.temperature())
        logits = self.mlm_head(enc.fused[batch["mlm_sel"]])
        l_mlm = masked_nll(logits, batch["mlm_targets"])
        return {"cl": l_cl, "mlm": l_mlm, "total": total_loss(l_cl, l_mlm, weights)}


class TTEModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = MDTIEncoder(cfg)
        self.head = TTEHead(cfg.dim)

    def forward(self, batch, net_t) -> Tensor:
        return self.head(self.encoder(batch, net_t).cls)
