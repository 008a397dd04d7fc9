"""Command line entry point (``cliqueformer --help``)."""
from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import yaml

from . import experiments as ex
from .design import optimize_designs
from .model import load_checkpoint, save_checkpoint
from .training import train


def _load_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise click.BadParameter("config file must hold a key-value mapping", param_hint="--config")
    return data


def _run_config(config, **overrides) -> ex.RunConfig:
    data = _load_config(config)
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ex.RunConfig.from_dict(data)
    except (TypeError, ValueError) as err:
        raise click.UsageError(str(err)) from err


def _emit(obj, out: Path | None, name: str) -> None:
    text = json.dumps(obj, indent=2)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")
    click.echo(text)


task_opt = click.option("--task", type=click.Choice(sorted(ex.TASKS)), default=None, help="Benchmark task.")
method_opt = click.option("--method", type=click.Choice(ex.METHODS), default=None, help="Optimization method.")
config_opt = click.option("--config", type=click.Path(exists=True, dir_okay=False), help="YAML run config.")
out_opt = click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output directory.")
metric_opt = click.option("--metric", type=click.Choice(sorted(ex.METRICS)), default=None)
tfbind_opt = click.option("--tfbind-path", type=click.Path(exists=True, dir_okay=False), default=None)


@click.group()
def main():
    """Offline model-based optimization with clique-decomposed surrogates."""


@main.command()
@task_opt
@config_opt
@out_opt
@tfbind_opt
def generate(task, config, out, tfbind_path):
    """Write a task and its filtered training data."""
    cfg = _run_config(config, task=task, tfbind_path=tfbind_path)
    out = out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    task_obj, data, _ = ex.build_task(cfg)
    if task_obj is not None:
        task_obj.save(out / "task.npz")
    data.save(out / "dataset.npz")
    click.echo(json.dumps({"task": cfg.task, "rows": len(data), "y_min": data.y_min, "y_max": data.y_max}))


@main.command(name="train")
@task_opt
@method_opt
@click.option("--seed", type=int, default=0, show_default=True)
@config_opt
@out_opt
@tfbind_opt
def train_cmd(task, method, seed, config, out, tfbind_path):
    """Train a Cliqueformer; writes model.pt and curves.csv."""
    cfg = _run_config(config, task=task, method=method, tfbind_path=tfbind_path)
    if cfg.method != "cliqueformer":
        raise click.UsageError("baselines fit inside `design`/`bench`; `train` is for cliqueformer")
    out = out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    _, data, _ = ex.build_task(cfg)
    model, report = train(data, ex.model_config_for(cfg, data), ex.train_config_for(cfg, seed))
    report.write_csv(out / "curves.csv")
    save_checkpoint(out / "model.pt", model, {"wall_clock": report.wall_clock, "task": cfg.task})
    click.echo(json.dumps({"checkpoint": str(out / "model.pt"), "final_loss": report.total[-1] if report.total else None}))


@main.command()
@task_opt
@method_opt
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--batch-size", type=int, default=None, help="Number of candidates.")
@config_opt
@out_opt
@tfbind_opt
def design(task, method, checkpoint, seed, batch_size, config, out, tfbind_path):
    """Produce candidates.npz from a checkpoint (or by running a baseline)."""
    cfg = _run_config(config, task=task, method=method, tfbind_path=tfbind_path)
    out = out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    _, data, _ = ex.build_task(cfg)
    if cfg.method == "cliqueformer":
        if checkpoint is None:
            raise click.UsageError("--checkpoint is required for the cliqueformer method")
        model, _ = load_checkpoint(checkpoint)
        dcfg = ex.design_config_for(cfg, seed)
        if batch_size is not None:
            dcfg.batch_size = batch_size
        designs = optimize_designs(model, data, dcfg).designs
    else:
        if batch_size is not None:
            cfg.baseline["n_candidates"] = batch_size
        designs = ex._run_method(cfg, data, seed, out / f"seed-{seed}")
    np.savez(out / "candidates.npz", designs=designs)
    click.echo(json.dumps({"candidates": str(out / "candidates.npz"), "n": int(len(designs))}))


@main.command()
@task_opt
@click.option("--candidates", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--top-k", type=int, default=10, show_default=True)
@config_opt
@out_opt
@tfbind_opt
def evaluate(task, candidates, top_k, config, out, tfbind_path):
    """Score candidates with the task oracle."""
    cfg = _run_config(config, task=task, tfbind_path=tfbind_path)
    _, _, oracle = ex.build_task(cfg)
    with np.load(candidates) as f:
        designs = f["designs"]
    try:
        row = ex.evaluate_candidates(oracle, designs, top_k)
    except ValueError as err:
        raise click.UsageError(str(err)) from err
    _emit({"task": cfg.task, "top_k": top_k, **row}, out, "eval.json")


@main.command()
@task_opt
@method_opt
@click.option("--seeds", type=int, default=None, help="Run seeds 0..N-1.")
@metric_opt
@config_opt
@out_opt
@tfbind_opt
def bench(task, method, seeds, metric, config, out, tfbind_path):
    """End-to-end benchmark over seeds."""
    cfg = _run_config(
        config,
        task=task,
        method=method,
        metric=metric,
        seeds=list(range(seeds)) if seeds else None,
        out=str(out) if out else None,
        tfbind_path=tfbind_path,
    )
    try:
        result = ex.run_benchmark(cfg)
    except ex.StageError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(1)
    click.echo(json.dumps(result.summary(), indent=2))


@main.command()
@task_opt
@click.option("--variant", "variants", multiple=True, help="Variant name; repeatable. Defaults to base, no_vib, no_weight_decay.")
@click.option("--seeds", type=int, default=None)
@config_opt
@out_opt
def ablate(task, variants, seeds, config, out):
    """Run the ablation variants and print a comparison table."""
    cfg = _run_config(
        config, task=task, method="cliqueformer", seeds=list(range(seeds)) if seeds else None, out=str(out) if out else None
    )
    try:
        table = ex.ablation_suite(cfg, variants or ex.ABLATION_VARIANTS)
    except ValueError as err:
        raise click.UsageError(str(err)) from err
    click.echo(f"{'variant':<20} {'score':>8} {'validity':>9} {'disp':>8}")
    for row in table:
        click.echo(f"{row['variant']:<20} {row['mean_score']:8.3f} {row['mean_validity']:9.2%} {row['dispersion']:8.3f}")
    if out:
        (out / "ablation.json").write_text(json.dumps(table, indent=2))


@main.command(name="demo-rotation")
@click.option("--l", "dims", type=int, multiple=True, default=(2, 3, 4, 5, 6, 7, 8), show_default=True)
@click.option("--probes", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def demo_rotation(dims, probes, seed):
    """Mixed partials of one function in two parameterizations."""
    rows = []
    for l in dims:
        try:
            rows.append(ex.rotation_demo(l, probes, seed))
        except ValueError as err:
            raise click.UsageError(str(err)) from err
    click.echo(json.dumps(rows, indent=2))


@main.command(name="demo-fgm")
@click.option("--seeds", type=int, default=5, show_default=True)
@click.option("--n-triangles", type=int, default=None)
@out_opt
def demo_fgm(seeds, n_triangles, out):
    """Decomposed versus monolithic surrogate on a chain-of-triangles function."""
    study = ex.FgmStudyConfig()
    if n_triangles is not None:
        study.n_triangles = n_triangles
    rows = [{"seed": s, **ex.fgm_vs_oblivious(s, study)} for s in range(seeds)]
    _emit({"config": asdict(study), "runs": rows}, out, "fgm.json")


if __name__ == "__main__":
    main()
