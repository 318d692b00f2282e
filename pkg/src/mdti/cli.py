"""Command-line entry point: ``mdti generate | pretrain | finetune | evaluate``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, apply_seed_override, load_config
from .errors import MDTIError
from .io import read_dataset, write_dataset
from .synthetic import generate_synthetic
from .train import (
    HISTORY_FILE,
    Pipeline,
    evaluate,
    finetune_tte,
    load_tte,
    pretrain,
    read_json,
    write_json,
)
from .trajectory import split_dataset

SOURCE_FILE = "source.json"


def _fail(e: Exception):
    raise click.ClickException(str(e)) from e


def _split(ds, name: str):
    try:
        return ds.split(name)
    except KeyError as e:
        raise click.ClickException(f"dataset at {ds.root} has no '{name}' split") from e


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Per-epoch progress on stderr.")
def main(verbose: bool):
    """Multimodal trajectory pretraining and travel-time estimation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def generate(config_path, out):
    """Generate a synthetic city and a 60/20/20 split."""
    try:
        run = load_config(config_path)
        samples, net, spec = generate_synthetic(run.generator, run.train.seed)
        train, val, test = split_dataset(samples, seed=run.train.seed)
    except MDTIError as e:
        _fail(e)
    splits = {"train": [s.id for s in train], "val": [s.id for s in val], "test": [s.id for s in test]}
    write_dataset(out, samples, net, spec, splits)
    click.echo(f"wrote {len(samples)} trajectories over {len(net)} road segments to {out}")


@main.command("pretrain")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def pretrain_cmd(config_path, data, out):
    """Self-supervised pretraining; the best-validation checkpoint lands in OUT/best."""
    try:
        cfg = load_config(config_path).train
        ds = read_dataset(data)
        res = pretrain(cfg, ds.net, ds.spec, _split(ds, "train"), _split(ds, "val"), out)
    except MDTIError as e:
        _fail(e)
    last = res.history[-1]
    click.echo(
        f"best epoch {res.best_epoch}; final L_CL {last['train_cl']:.4f} L_MLM {last['train_mlm']:.4f}; "
        f"checkpoint {Path(out) / 'best'}"
    )


@main.command("finetune")
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--freeze-encoder", is_flag=True, help="Train only the travel-time head.")
def finetune_cmd(ckpt, data, out, freeze_encoder):
    """Fine-tune for travel-time estimation from a pretrained checkpoint."""
    try:
        pre = load_checkpoint(ckpt)
        cfg = apply_seed_override(TrainConfig.from_dict(pre.config))
        ds = read_dataset(data)
        res = finetune_tte(
            cfg, pre, ds.net, ds.spec, _split(ds, "train"), _split(ds, "val"), _split(ds, "test"), freeze_encoder
        )
    except MDTIError as e:
        _fail(e)
    out = Path(out)
    save_checkpoint(res.checkpoint(cfg), out)
    write_json(out / HISTORY_FILE, res.history)
    write_json(out / SOURCE_FILE, {"data": str(Path(data).resolve())})
    write_json(out / "report_test.json", res.reports["test"])
    click.echo(json.dumps(res.reports["test"], sort_keys=True))


@main.command("evaluate")
@click.option("--model", "model_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="Dataset directory (default: the one used for fine-tuning).")
@click.option("--out", "report_path", type=click.Path(dir_okay=False), help="Also write the report here.")
def evaluate_cmd(model_dir, split, data, report_path):
    """Print a JSON metrics report for one split."""
    try:
        ckpt = load_checkpoint(model_dir)
        model, cfg = load_tte(ckpt)
        if data is None:
            source = Path(model_dir) / SOURCE_FILE
            if not source.exists():
                raise click.ClickException("no --data given and the model directory records no dataset")
            data = read_json(source)["data"]
        ds = read_dataset(data)
        pipe = Pipeline(cfg, ds.net, ds.spec, ckpt.pattern_library)
        report = evaluate(model, pipe, _split(ds, split), cfg)
    except (MDTIError, ValueError) as e:
        _fail(e)
    if report_path:
        write_json(report_path, report)
    click.echo(json.dumps(report, sort_keys=True))


if __name__ == "__main__":
    main()
