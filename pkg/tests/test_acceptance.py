"""The ten acceptance criteria, each at its stated tolerance.

Every test reports a one-line PASS/FAIL verdict through the ``acceptance``
fixture; the lines are repeated in the terminal summary.
"""
import filecmp
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

import mdti.nn as mnn
from mdti.config import TrainConfig
from mdti.fusion import FusionAlign, align_batch, align_length, residual_fuse
from mdti.gps_encoder import pattern_similarity, trend
from mdti.grid_encoder import GridEncoder, neighbor_lists
from mdti.interactor import Interactor
from mdti.model import ModelConfig, PretrainModel, TTEModel, collate, network_tensors
from mdti.nn import (
    EncoderLayer,
    FeedForward,
    GATLayer,
    MultiHeadAttention,
    gradcheck,
    linear,
)
from mdti.objectives import (
    Temperature,
    TTEHead,
    info_nce,
    mask_sequence,
    metrics,
    mlm_loss,
    tte_loss,
)
from mdti.road_encoder import (
    CLS,
    MASK,
    PAD,
    RoadEncoder,
    TypeBiasLayer,
)
from mdti.synthetic import GeneratorConfig, generate_synthetic
from mdti.train import Pipeline, finetune_tte, pretrain
from mdti.trajectory import split_dataset, truncate_sample

from .helpers import dense_gat_oracle, rand, random_graph, small_config

# desk-scale pretraining for the learning-dynamics and ablation checks
DESK = dict(lr=5e-4, batch_size=4, dropout=0.0, warmup_epochs=1, epochs=10)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        dim=8, heads=2, road_layers=1, grid_layers=1, gat_heads=2, grid_gat_dim=4,
        dropout=0.0, segments=4, d_lm=8, max_offset=2, ffn_mult=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(n_samples: int, seed: int, dtype=torch.float64, masked: bool = True):
    """A padded batch from a tiny 3x3-lattice city, plus its network tensors."""
    samples, net, spec = generate_synthetic(
        GeneratorConfig(trips=n_samples, rows=8, cols=8, lattice_rows=3, lattice_cols=3), seed=seed
    )
    cfg = small_config(d_lm=8, T_segments=4, K_patterns=2)
    pipe = Pipeline.fit(cfg, net, spec, samples)
    masks = pipe.masks(samples, np.random.default_rng(seed)) if masked else None
    batch = collate(pipe.features.many(samples), pipe.types, masks, dtype=dtype)
    return batch, network_tensors(net, dtype), net, samples


# 1 --------------------------------------------------------------------------


def test_formula_oracles(acceptance):
    start = time.perf_counter()
    checks = {}
    lib = np.zeros((2, 9))
    p = np.zeros(9)
    p[4] = 1.0
    s = pattern_similarity(p, np.vstack([p, lib]))
    checks["similarity self"] = s[0] == 1.0
    checks["similarity unit"] = abs(s[1] - math.exp(-1 / (2 * math.sqrt(3)))) < 1e-15
    checks["trend single"] = trend([5]) == 0
    checks["trend telescoping"] = trend([1, 3, 2, 5]) == 4

    e = torch.eye(2, dtype=torch.float64)
    checks["info_nce N=1"] = abs(info_nce(rand(1, 4), rand(1, 4, seed=1), 0.07).item()) < 1e-12
    checks["info_nce N=2"] = abs(info_nce(e, e, 1.0).item() - 0.31326) < 1e-5

    v = 60
    uniform = mlm_loss(torch.zeros(5, v, dtype=torch.float64), mask_sequence([1, 2, 3, 4, 5], 0.5, np.random.default_rng(0)))
    checks["mlm uniform"] = abs(uniform.item() - math.log(v)) < 1e-9
    one = mask_sequence([0], 0.0, np.random.default_rng(0))
    checks["mlm V=3"] = abs(mlm_loss(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64), one).item() - 0.55145) < 1e-5

    m = metrics([2, 4], [1, 2])
    checks["metrics hand"] = (
        m["mae"] == 1.5 and abs(m["rmse"] - 1.58114) < 1e-5 and abs(m["rmse"] - math.sqrt(2.5)) < 1e-15 and m["mape"] == 1.0
    )
    checks["metrics perfect"] = metrics([3.0, 7.0], [3.0, 7.0]) == {"mae": 0.0, "rmse": 0.0, "mape": 0.0}
    elapsed = time.perf_counter() - start
    failed = [k for k, ok in checks.items() if not ok]
    ok = not failed and elapsed < 1.0
    acceptance(1, "formula oracles", ok, f"{len(checks)} oracles, {elapsed:.2f}s" + (f", failed {failed}" if failed else ""))
    assert ok, (failed, elapsed)


# 2 --------------------------------------------------------------------------


def test_gat_equivalence(acceptance):
    start = time.perf_counter()
    torch.manual_seed(0)
    grid = GridEncoder(dim=8, gat_dim=8, heads=2, dropout=0.0).double().eval()
    road = RoadEncoder(dim=8, heads=2, layers=1, gat_heads=2, dropout=0.0).double().eval()
    layers = {"grid.gat1": grid.gat1, "grid.gat2": grid.gat2, "road.gat1": road.gat1, "road.gat2": road.gat2}
    rng = np.random.default_rng(2024)
    worst = 0.0
    with torch.no_grad():
        for g in range(20):
            n = int(rng.integers(1, 7))
            adj = random_graph(n, float(rng.uniform(0.1, 0.9)), rng)
            for name, layer in layers.items():
                h = rand(n, layer.weight.in_features, seed=g)
                ref = dense_gat_oracle(layer, h, adj)
                worst = max(worst, (layer(h, torch.as_tensor(adj)) - ref).abs().max().item())
                if name.startswith("grid"):
                    # the grid encoder runs on neighbour lists
                    idx, ok = neighbor_lists(adj)
                    sparse = layer(h, (torch.as_tensor(idx), torch.as_tensor(ok)))
                    worst = max(worst, (sparse - ref).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 5.0
    acceptance(2, "GAT equivalence", ok, f"20 graphs x 4 layers, max |diff| {worst:.1e}, {elapsed:.2f}s")
    assert ok, (worst, elapsed)


# 3 --------------------------------------------------------------------------


def _layer_cases():
    torch.manual_seed(1)
    x = rand(2, 5, 8)
    key_mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
    adj = torch.as_tensor(random_graph(5, 0.5, np.random.default_rng(3)))
    idx, ok = neighbor_lists(adj.numpy())
    nbr = (torch.as_tensor(idx), torch.as_tensor(ok))
    w = {"W": rand(8, 3, seed=4), "b": rand(3, seed=5)}

    mha = MultiHeadAttention(8, 2)
    ln = torch.nn.LayerNorm(8)
    ffn = FeedForward(8, 16)
    enc = EncoderLayer(8, 2, 16)
    tb = TypeBiasLayer(8, 2, 16)
    gat = GATLayer(8, 8, 2, concat=True)
    gat_mean = GATLayer(8, 4, 2, concat=False)
    fusion = FusionAlign(6, 8, 4)
    inter = Interactor(8, 2, 0.0, 2, 16)
    head = TTEHead(8)
    temp = Temperature(0.5)
    lengths = torch.tensor([3, 6])
    grid_seq = rand(2, 5, 8, seed=6)
    z = rand(2, 6, 6, seed=7)
    type_e = rand(2, 5, 8, seed=8)
    q_pos = torch.tensor([[0, 1, 1, 2], [0, 3, 4, 4]])

    return [
        ("linear", w, lambda p: torch.tanh(linear(x, p["W"], p["b"])).sum()),
        ("attention", mha, lambda p: torch.tanh(mha(x, x, x, key_mask=key_mask)).sum()),
        ("layernorm", ln, lambda p: torch.tanh(ln(x)).pow(2).sum()),
        ("feedforward", ffn, lambda p: torch.tanh(ffn(x)).sum()),
        ("encoder layer", enc, lambda p: torch.tanh(enc(x, key_mask)).sum()),
        ("type-bias layer", tb, lambda p: torch.tanh(tb(x, type_e, key_mask)).sum()),
        ("gat dense", gat, lambda p: torch.tanh(gat(x[0], adj)).sum()),
        ("gat neighbour list", gat_mean, lambda p: torch.tanh(gat_mean(x[0], nbr)).sum()),
        ("fusion align", fusion, lambda p: torch.tanh(fusion(grid_seq, z, lengths)[0]).sum()),
        ("interactor", inter, lambda p: torch.tanh(inter(x[:, :4], grid_seq, q_pos=q_pos)).sum()),
        ("tte head", head, lambda p: tte_loss(head(x[:, 0]), torch.tensor([1.0, 2.0], dtype=torch.float64))),
        ("info_nce temperature", temp, lambda p: info_nce(x[:, 0], x[:, 1], temp())),
    ]


def test_gradient_suite(acceptance):
    start = time.perf_counter()
    errors = {}
    for name, params, f in _layer_cases():
        if isinstance(params, torch.nn.Module):
            params = dict(params.double().named_parameters())
        errors[name] = gradcheck(f, params)

    torch.manual_seed(2)
    batch, net_t, net, _ = toy_batch(2, seed=4)
    model = PretrainModel(tiny_model_config(), len(net), 0.5).double().train()
    errors["end to end"] = gradcheck(lambda p: model(batch, net_t)["total"], dict(model.named_parameters()))
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-3 and elapsed < 60.0
    detail = f"{len(errors) - 1} layer types + end to end ({errors['end to end']:.1e}), worst {worst} {errors[worst]:.1e}, {elapsed:.1f}s"
    acceptance(3, "gradient suite", ok, detail)
    assert ok, (errors, elapsed)


# 4 --------------------------------------------------------------------------


def test_alignment_contract(acceptance):
    T, D = 8, 6
    failures = []
    grid = rand(T + 1, D, seed=1)
    for n in (T - 3, T, T + 3):
        z = rand(n, D, seed=n)
        out, pad = align_length(z, T)
        k = min(n, T)
        if out.shape != (T, D) or not torch.equal(out[:k], z[:k]) or out[k:].abs().sum() != 0:
            failures.append(f"values n={n}")
        if not torch.equal(pad, torch.arange(T) >= n):
            failures.append(f"mask n={n}")
        batched, bpad = align_batch(z[None], torch.tensor([n]), T)
        if not (torch.equal(batched[0], out) and torch.equal(bpad[0], pad)):
            failures.append(f"batched n={n}")
        fused = residual_fuse(grid, out)
        if not torch.equal(fused[0], grid[0]):
            failures.append(f"cls n={n}")
        if not torch.equal(fused[1:], grid[1:] + out):
            failures.append(f"residual n={n}")
    if not torch.equal(residual_fuse(grid, torch.zeros(T, D, dtype=grid.dtype)), grid):
        failures.append("zero gps")
    # the module route: a zeroed projection makes z'' = 0
    mod = FusionAlign(5, D, T).double()
    torch.nn.init.zeros_(mod.proj.weight)
    torch.nn.init.zeros_(mod.proj.bias)
    g3 = rand(3, T + 1, D, seed=9)
    fused, _ = mod(g3, rand(3, T + 3, 5, seed=10), torch.tensor([T - 3, T, T + 3]))
    if not torch.equal(fused, g3):
        failures.append("zero projection")
    acceptance(4, "alignment contract", not failures, "n in {T-3, T, T+3}" + (f", failed {failures}" if failures else ""))
    assert not failures


# 5 --------------------------------------------------------------------------


def test_masking_statistics(acceptance):
    rng = np.random.default_rng(0)
    tokens = masked = 0
    while tokens < 100_000:
        seq = rng.integers(0, 60, size=int(rng.integers(20, 80)))
        masked += len(mask_sequence(seq, 0.15, rng).mask_positions)
        tokens += len(seq)
    rate = masked / tokens

    feats, types = _padded_features()
    leaks = 0
    for seed in range(1000):
        r = np.random.default_rng(seed)
        masks = [mask_sequence(f.road.segments, 0.15, r) for f in feats]
        batch = collate(feats, types, masks)
        sel, ids, pad = batch["mlm_sel"], batch["ids"], batch["pad"]
        leaks += int(sel[:, 0].any()) + int((sel & pad).any())
        leaks += int((ids[:, 0] != CLS).any()) + int((ids[pad] != PAD).any())
        leaks += int(((ids == MASK) != sel).any())
    ok = 0.14 <= rate <= 0.16 and leaks == 0
    acceptance(5, "masking statistics", ok, f"rate {rate:.4f} over {tokens} tokens, {leaks} CLS/PAD hits in 1000 seeds")
    assert 0.14 <= rate <= 0.16, rate
    assert leaks == 0


def _padded_features():
    samples, net, spec = generate_synthetic(GeneratorConfig(trips=12), seed=8)
    by_len = sorted(samples, key=lambda s: len(s.road))
    chosen = [by_len[0], by_len[len(by_len) // 2], by_len[-1]]
    assert len({len(s.road) for s in chosen}) == 3
    pipe = Pipeline.fit(small_config(d_lm=8, K_patterns=2), net, spec, samples)
    return pipe.features.many(chosen), pipe.types


# 6 --------------------------------------------------------------------------


def test_attention_hygiene(acceptance, monkeypatch):
    seen = []
    original = mnn.masked_softmax

    def recording(scores, mask=None):
        out = original(scores, mask)
        seen.append(out.detach())
        return out

    monkeypatch.setattr(mnn, "masked_softmax", recording)
    torch.manual_seed(3)
    batch, net_t, net, _ = toy_batch(5, seed=12, dtype=torch.float32)
    cfg = tiny_model_config(dim=16, road_layers=2, grid_layers=2)
    pre = PretrainModel(cfg, len(net)).eval()
    tte = TTEModel(cfg).eval()
    with torch.no_grad():
        pre(batch, net_t)
        base = tte.encoder(batch, net_t)
    row_err = max((w.sum(-1) - 1).abs().max().item() for w in seen)

    # scramble every padded road slot
    assert batch["pad"].any()
    g = torch.Generator().manual_seed(0)
    noisy = dict(batch)
    pad = batch["pad"]
    for key, hi in (("ids", len(net)), ("dow", 7), ("minute", 96), ("type", 4), ("road_slot", cfg.segments + 1)):
        t = batch[key].clone()
        t[pad] = torch.randint(0, hi, (int(pad.sum()),), generator=g)
        noisy[key] = t
    with torch.no_grad():
        again = tte.encoder(noisy, net_t)
    keep = ~pad
    same = (
        torch.equal(base.road[keep], again.road[keep])
        and torch.equal(base.fused[keep], again.fused[keep])
        and torch.equal(base.grid, again.grid)
        and torch.equal(tte.head(base.cls), tte.head(again.cls))
    )
    ok = row_err <= 1e-6 and same
    acceptance(6, "attention hygiene", ok, f"{len(seen)} softmax calls, max |row sum - 1| {row_err:.1e}, padded perturbation {'bit-equal' if same else 'LEAKS'}")
    assert row_err <= 1e-6
    assert same


# 7 & 9 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_city():
    samples, net, spec = generate_synthetic(GeneratorConfig(trips=256), seed=0)
    assert (spec.rows, spec.cols) == (32, 32) and len(net) == 60
    _, val, _ = split_dataset(samples, seed=0)
    return samples, val, net, spec


@pytest.fixture(scope="module")
def desk_runs(desk_city):
    """Pretraining runs keyed by loss weights, computed on first use."""
    samples, val, net, spec = desk_city
    cache = {}

    def run(weights):
        if weights not in cache:
            start = time.perf_counter()
            cfg = TrainConfig(loss_weights=weights, **DESK)
            cache[weights] = (pretrain(cfg, net, spec, samples, val), time.perf_counter() - start)
        return cache[weights]

    return run


@pytest.mark.slow
def test_learning_dynamics(acceptance, desk_city, desk_runs):
    samples, _, net, spec = desk_city
    res, pre_time = desk_runs((1.0, 1.0))
    h = res.history
    cl_drop = 1 - h[-1]["train_cl"] / h[0]["train_cl"]
    mlm_drop = 1 - h[-1]["train_mlm"] / h[0]["train_mlm"]

    start = time.perf_counter()
    overfit = samples[:64]
    cfg = TrainConfig(**{**DESK, "epochs": 200, "warmup_epochs": 5, "lr": 1e-3, "batch_size": 16})
    ft = finetune_tte(cfg, res.checkpoint, net, spec, overfit, overfit)
    mape = ft.reports["val"]["mape"]
    elapsed = pre_time + time.perf_counter() - start
    ok = cl_drop >= 0.30 and mlm_drop >= 0.30 and mape < 0.10
    detail = f"L_CL -{cl_drop:.1%}, L_MLM -{mlm_drop:.1%}, overfit train MAPE {mape:.4f}, {elapsed / 60:.1f} min"
    acceptance(7, "learning dynamics", ok, detail)
    assert cl_drop >= 0.30 and mlm_drop >= 0.30, detail
    assert mape < 0.10, detail


@pytest.mark.slow
def test_ablation_harness(acceptance, desk_runs):
    finals = {}
    for w in ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0)):
        h = desk_runs(w)[0].history
        assert len(h) == DESK["epochs"] and all(math.isfinite(r["val_total"]) for r in h)
        finals[w] = h[-1]["val_cl"] + h[-1]["val_mlm"]
    joint = finals[(1.0, 1.0)]
    ok = joint <= finals[(1.0, 0.0)] and joint <= finals[(0.0, 1.0)]
    detail = ", ".join(f"{w}: {v:.3f}" for w, v in finals.items())
    acceptance(9, "ablation harness", ok, f"val L_CL + L_MLM at epoch {DESK['epochs']}: {detail}")
    assert ok, finals


# 8 --------------------------------------------------------------------------


@pytest.mark.slow
def test_length_robustness(acceptance):
    samples, net, spec = generate_synthetic(GeneratorConfig(trips=150, lengths=[10, 65, 120]), seed=1)
    tr, va, te = split_dataset(samples, seed=0)
    cfg = small_config(dim=64, T_segments=16, K_patterns=8, epochs=30, warmup_epochs=2, lr=2e-3, seed=0)

    def test_mae(train, val, test):
        return finetune_tte(cfg, None, net, spec, train, val, test).reports["test"]["mae"]

    maes = {"dynamic": test_mae(tr, va, te)}
    for keep in ("prefix", "suffix"):
        cut = [[truncate_sample(s, 10, keep) for s in part] for part in (tr, va, te)]
        maes[f"{keep}-10"] = test_mae(*cut)
    best_fixed = min(maes["prefix-10"], maes["suffix-10"])
    ok = maes["dynamic"] <= best_fixed
    acceptance(8, "length robustness", ok, ", ".join(f"{k} MAE {v:.3f}" for k, v in maes.items()))
    assert ok, maes


# 10 -------------------------------------------------------------------------

REPRO_TOML = """
dim = 16
heads = 2
road_layers = 1
grid_layers = 1
gat_heads = 2
grid_gat_dim = 8
d_lm = 16
T_segments = 4
K_patterns = 4
batch_size = 8
epochs = 2
warmup_epochs = 1
lr = 1e-3
seed = 5

[generator]
trips = 40
"""


def _cli(*args):
    env = {k: v for k, v in os.environ.items() if k != "MDTI_SEED"}
    proc = subprocess.run([sys.executable, "-m", "mdti.cli", *map(str, args)], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_reproducibility(acceptance, tmp_path):
    outputs = {}
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        (root / "c.toml").write_text(REPRO_TOML)
        _cli("generate", "--config", root / "c.toml", "--out", root / "data")
        _cli("pretrain", "--config", root / "c.toml", "--data", root / "data", "--out", root / "ckpt")
        _cli("finetune", "--ckpt", root / "ckpt" / "best", "--data", root / "data", "--out", root / "model")
        outputs[run] = _cli("evaluate", "--model", root / "model", "--split", "test")

    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(
        p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name not in ("c.toml", "source.json")
    )
    differ = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    ok = not differ and outputs["a"] == outputs["b"] and len(files) >= 8
    acceptance(10, "reproducibility", ok, f"{len(files)} files byte-identical across fresh processes" if ok else f"differ: {differ}")
    assert not differ, differ
    assert outputs["a"] == outputs["b"]
