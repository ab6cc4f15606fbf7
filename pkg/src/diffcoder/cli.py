"""Command-line entry points: data generation, training, evaluation,
experiment matrices, and mosaic rendering.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The env var
DIFFCODER_CACHE overrides where matrix runs cache generated datasets.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .data import (
    DataError,
    Dataset,
    denormalize_array,
    normalize,
    read_dataset,
    split_dataset,
    synth_generate,
    write_dataset,
)
from .engine import (
    EngineError,
    TrainConfig,
    TrainedModel,
    fit,
    load_checkpoint,
    reconstruct,
)
from .metrics import (
    MetricError,
    highfreq_spectral_error,
    interp_baseline,
    rel_l2,
    spectral_error,
)
from .nets import NetError, solve_width_for_budget
from .report import (
    BASELINE_METHODS,
    METHOD_MODEL,
    METRIC_NAMES,
    EvalReport,
    ReportError,
    percentile_sample_index,
    render_comparison_tables,
)
from .schedule import ScheduleError

_DIFFCODER_ERRORS = (
    DataError, EngineError, MetricError, NetError, ReportError, ScheduleError, OSError,
)


def _runtime_errors(fn):
    """Map library errors onto exit code 1 with the message on stderr."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _DIFFCODER_ERRORS as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _power_of_two(ctx, param, value):
    if value is None:
        return value
    if value < 16 or value & (value - 1):
        raise click.UsageError(f"--grid must be a power of two >= 16, got {value}")
    return value


def _parse_size(ctx, param, value):
    if value is None:
        return value
    text = str(value).strip().upper()
    try:
        if text.endswith("M"):
            return int(float(text[:-1]) * 1_000_000)
        if text.endswith("K"):
            return int(float(text[:-1]) * 1_000)
        return int(text)
    except ValueError:
        raise click.UsageError(f"cannot parse --size {value!r} (use e.g. 100K, 2M, 400000)")


def dataset_fingerprint(path: Path) -> str:
    manifest = Path(path) / "manifest.json"
    return hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]


@click.group()
def main():
    """Flow-field compression with a diffusion decoder and a VAE baseline."""


@main.command("gen-data")
@click.option("--grid", type=int, required=True, callback=_power_of_two,
              help="Grid side (power of two >= 16).")
@click.option("--traj", type=int, required=True, help="Number of trajectories.")
@click.option("--frames", type=int, required=True, help="Frames per trajectory.")
@click.option("--slope", type=float, default=-3.0, show_default=True,
              help="Target kinetic-energy spectrum slope (negative).")
@click.option("--forcing-k", type=int, default=4, show_default=True,
              help="Amplified forcing wavenumber.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_runtime_errors
def cmd_gen_data(grid, traj, frames, slope, forcing_k, seed, out):
    """Generate a synthetic spectrum-controlled dataset."""
    ds = synth_generate(grid, traj, frames, slope, forcing_k, seed)
    write_dataset(ds, out)
    click.echo(f"wrote {traj} trajectories x {frames} frames at {grid}x{grid} to {out}")


_TRAIN_OPTIONS = [
    click.option("--arch", type=click.Choice(["vae", "diffcoder"]), required=True),
    click.option("--size", required=True, callback=_parse_size,
                 help="Parameter budget (e.g. 100K, 1M)."),
    click.option("--depth", type=int, required=True, help="Encoder depth (2x downsamples)."),
    click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True),
    click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--n-train", type=int, default=None,
                 help="Trajectories in the train split (default: 5/6 of total)."),
    click.option("--attention", type=click.Choice(["none", "encoder", "decoder", "both"]),
                 default="none", show_default=True),
    click.option("--epochs", type=int, default=10, show_default=True),
    click.option("--batch-size", type=int, default=16, show_default=True),
    click.option("--max-lr", type=float, default=5e-4, show_default=True),
    click.option("--timesteps", "t_steps", type=int, default=1000, show_default=True,
                 help="Diffusion timestep count T."),
    click.option("--schedule", "schedule_kind",
                 type=click.Choice(["sigmoid", "linear", "cosine"]),
                 default="sigmoid", show_default=True),
    click.option("--lambda-min", type=float, default=-15.0, show_default=True),
    click.option("--lambda-max", type=float, default=5.0, show_default=True),
    click.option("--ddim-steps", type=int, default=20, show_default=True),
    click.option("--kl-weight", type=float, default=1e-4, show_default=True),
]


def _add_options(options):
    def deco(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn

    return deco


ATTENTION_FLAGS = {
    "none": (False, False),
    "encoder": (True, False),
    "decoder": (False, True),
    "both": (True, True),
}


def _train_impl(arch, size, depth, data_dir, out_dir, seed, n_train, attention,
                epochs, batch_size, max_lr, t_steps, schedule_kind,
                lambda_min, lambda_max, ddim_steps, kl_weight) -> TrainedModel:
    ds = read_dataset(data_dir)
    if n_train is None:
        n_train = max(1, len(ds.trajectories) * 5 // 6)
    train, _ = split_dataset(ds, n_train, seed=seed)
    train_n = normalize(train)
    spec = solve_width_for_budget(size, depth, arch, ATTENTION_FLAGS[attention])
    config = TrainConfig(
        epochs=epochs, batch_size=batch_size, max_lr=max_lr, T=t_steps,
        schedule_kind=schedule_kind, lambda_min=lambda_min, lambda_max=lambda_max,
        ddim_steps=ddim_steps, seed=seed, kl_weight=kl_weight,
    )
    provenance = {
        "dataset_id": dataset_fingerprint(data_dir),
        "grid": list(ds.grid),
        "n_train": n_train,
        "split_seed": seed,
    }
    return fit(config, spec, train_n, out_dir, arch=arch, provenance=provenance)


@main.command("train")
@_add_options(_TRAIN_OPTIONS)
@_runtime_errors
def cmd_train(**kwargs):
    """Train one model and write per-epoch checkpoints plus `best`."""
    model = _train_impl(**kwargs)
    click.echo(f"trained {model.arch} (width {model.spec.base_width}) -> "
               f"{kwargs['out_dir']}/best")


def _test_split_for(model: TrainedModel, ds: Dataset) -> Dataset:
    if ds.split == "test":
        return ds
    prov = model.provenance
    if "n_train" in prov and "split_seed" in prov:
        _, test = split_dataset(ds, int(prov["n_train"]), seed=int(prov["split_seed"]))
        return test
    raise EngineError(
        "dataset is not a test split and the checkpoint carries no split provenance"
    )


def _evaluate(model: TrainedModel, ds: Dataset, seed: int, identity: bool):
    """Reconstruct the test split and compute all metrics.

    Returns (gt_fields, recons, report) in raw (denormalized) units.
    """
    if list(ds.grid) != list(model.provenance.get("grid", ds.grid)):
        raise EngineError(
            f"dataset grid {ds.grid} does not match the checkpoint's "
            f"training grid {model.provenance['grid']}"
        )
    if model.norm_stats is None:
        raise EngineError("checkpoint has no normalization stats")
    test = _test_split_for(model, ds)
    gt = test.all_frames().astype(np.float32)
    if identity:
        rec = gt.copy()
    else:
        test_n = normalize(test, stats=model.norm_stats)
        rec_n = reconstruct(model, test_n.all_frames(), seed=seed)
        rec = denormalize_array(rec_n, model.norm_stats).astype(np.float32)

    recons = {METHOD_MODEL: rec}
    for method in BASELINE_METHODS:
        recons[method] = np.stack(
            [interp_baseline(g, model.spec.depth, method) for g in gt]
        ).astype(np.float32)

    report = EvalReport(
        dataset_id=model.provenance.get("dataset_id", "unknown"),
        arch=model.arch,
        provenance={
            "model_spec": model.spec.to_dict(),
            "train_config": model.config.to_dict(),
            "eval_seed": seed,
            "identity": identity,
        },
    )
    for method, fields in recons.items():
        for r, g in zip(fields, gt):
            report.add_sample(method, {
                "rel_l2": rel_l2(r, g),
                "spectral_error": spectral_error(r, g),
                "highfreq_spectral_error": highfreq_spectral_error(r, g),
            })
    return gt, recons, report


@main.command("eval")
@click.option("--ckpt", type=click.Path(path_type=Path), required=True,
              help="Checkpoint directory.")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True,
              help="Report file to write (JSON).")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for the reconstruction noise.")
@click.option("--identity", is_flag=True,
              help="Debug: score the ground truth against itself.")
@_runtime_errors
def cmd_eval(ckpt, data_dir, out_path, seed, identity):
    """Evaluate a checkpoint on the test split with both baselines."""
    model = load_checkpoint(ckpt)
    ds = read_dataset(data_dir)
    _, _, report = _evaluate(model, ds, seed, identity)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(out_path)
    agg = report.aggregates()[METHOD_MODEL]
    click.echo(
        f"{report.n_samples} samples: " +
        "  ".join(f"{m}={agg[m]:.4f}" for m in METRIC_NAMES)
    )


@main.command("mosaic")
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--percentiles", type=float, multiple=True, default=(40.0, 60.0),
              show_default=True, help="Spectral-error percentiles to render.")
@click.option("--seed", type=int, default=0, show_default=True)
@_runtime_errors
def cmd_mosaic(ckpt, data_dir, out_dir, percentiles, seed):
    """Render reconstruction mosaics at spectral-error percentiles."""
    from .mosaic import render_mosaic

    for p in percentiles:
        if not 0 <= p <= 100:
            raise click.UsageError(f"percentile {p} outside [0, 100]")
    model = load_checkpoint(ckpt)
    ds = read_dataset(data_dir)
    gt, recons, report = _evaluate(model, ds, seed, identity=False)
    errors = report.per_sample[METHOD_MODEL]["spectral_error"]
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in percentiles:
        idx = percentile_sample_index(errors, p)
        sample_recons = {m: fields[idx] for m, fields in recons.items()}
        sample_metrics = {
            m: {metric: report.per_sample[m][metric][idx] for metric in METRIC_NAMES}
            for m in recons
        }
        out_path = out_dir / f"mosaic_p{int(round(p)):03d}_sample{idx:04d}.png"
        render_mosaic(gt[idx], sample_recons, sample_metrics, out_path,
                      title=f"{model.arch}, sample {idx}, p{p:g} spectral error")
        click.echo(f"wrote {out_path}")


def _matrix_cells(config: dict) -> list[dict]:
    sizes = config["sizes"]
    depths = config["depths"]
    archs = config.get("archs", ["vae", "diffcoder"])
    attention = [tuple(a) for a in config.get("attention", [[False, False]])]
    seeds = config.get("seeds", [0])
    cells = []
    for size, depth, arch, attn, seed in itertools.product(
        sizes, depths, archs, attention, seeds
    ):
        name = (f"{arch}_s{size}_d{depth}_attn{int(attn[0])}{int(attn[1])}_seed{seed}")
        cells.append({
            "name": name, "arch": arch, "size": size, "depth": depth,
            "attention": list(attn), "seed": seed,
        })
    return cells


def _matrix_dataset(config: dict, out: Path) -> Path:
    if "data" in config:
        return Path(config["data"])
    gen = config["gen"]
    cache_root = Path(os.environ.get("DIFFCODER_CACHE", out / "datasets"))
    key = hashlib.sha256(
        json.dumps(gen, sort_keys=True).encode()
    ).hexdigest()[:16]
    target = cache_root / f"synth_{key}"
    if not (target / "manifest.json").exists():
        ds = synth_generate(
            gen["grid"], gen["traj"], gen["frames"], gen["slope"],
            gen["forcing_k"], gen["seed"],
        )
        write_dataset(ds, target)
    return target


def _run_matrix_cell(payload: str) -> tuple[str, str]:
    """Worker for one cell: train then eval; returns (name, status)."""
    cell = json.loads(payload)
    try:
        name = cell["name"]
        cell_dir = Path(cell["out"]) / "cells" / name
        report_path = cell_dir / "report.json"
        if report_path.exists():
            return name, "skipped (report exists)"
        overrides = cell.get("train_overrides", {})
        attention = {tuple(v): k for k, v in ATTENTION_FLAGS.items()}[
            tuple(cell["attention"])
        ]
        model = _train_impl(
            arch=cell["arch"], size=cell["size"], depth=cell["depth"],
            data_dir=Path(cell["data"]), out_dir=cell_dir / "train",
            seed=cell["seed"], n_train=cell.get("n_train"), attention=attention,
            epochs=overrides.get("epochs", 10),
            batch_size=overrides.get("batch_size", 16),
            max_lr=overrides.get("max_lr", 5e-4),
            t_steps=overrides.get("T", 1000),
            schedule_kind=overrides.get("schedule_kind", "sigmoid"),
            lambda_min=overrides.get("lambda_min", -15.0),
            lambda_max=overrides.get("lambda_max", 5.0),
            ddim_steps=overrides.get("ddim_steps", 20),
            kl_weight=overrides.get("kl_weight", 1e-4),
        )
        ds = read_dataset(Path(cell["data"]))
        _, _, report = _evaluate(model, ds, seed=cell["seed"], identity=False)
        report.save(report_path)
        return name, "ok"
    except Exception as exc:  # cell failures must not kill the matrix
        return cell.get("name", "?"), f"error: {exc}"


@main.command("matrix")
@click.option("--config", "config_path", type=click.Path(path_type=Path), required=True,
              help="JSON config with sizes/depths/archs/seeds and data or gen.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Concurrent cells.")
@_runtime_errors
def cmd_matrix(config_path, out_dir, jobs):
    """Run a train+eval grid and emit the comparison tables."""
    config = json.loads(Path(config_path).read_text())
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = _matrix_dataset(config, out_dir)
    cells = _matrix_cells(config)
    for cell in cells:
        cell["out"] = str(out_dir)
        cell["data"] = str(data_dir)
        cell["n_train"] = config.get("n_train")
        cell["train_overrides"] = config.get("train", {})

    payloads = [json.dumps(c) for c in cells]
    if jobs > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=jobs,
                                 mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_run_matrix_cell, payloads))
    else:
        results = [_run_matrix_cell(p) for p in payloads]

    failures = []
    for name, status in results:
        click.echo(f"{name}: {status}")
        if status.startswith("error"):
            failures.append((name, status))

    _emit_tables(config, cells, out_dir)
    if failures:
        raise click.ClickException(f"{len(failures)} of {len(cells)} cells failed")


def _emit_tables(config: dict, cells: list[dict], out_dir: Path) -> None:
    attention_configs = sorted({tuple(c["attention"]) for c in cells})
    for attn in attention_configs:
        grouped: dict[tuple[int, int], dict[str, list[EvalReport]]] = {}
        for cell in cells:
            if tuple(cell["attention"]) != attn:
                continue
            report_path = Path(cell["out"]) / "cells" / cell["name"] / "report.json"
            if not report_path.exists():
                continue
            key = (cell["size"], cell["depth"])
            grouped.setdefault(key, {}).setdefault(cell["arch"], []).append(
                EvalReport.load(report_path)
            )
        merged: dict[tuple[int, int], dict[str, EvalReport]] = {}
        for key, by_arch in grouped.items():
            merged[key] = {arch: _merge_reports(reports) for arch, reports in by_arch.items()}
        if not merged:
            continue
        text, csv = render_comparison_tables(
            merged, sizes=config["sizes"], depths=config["depths"]
        )
        suffix = "" if len(attention_configs) == 1 else f"_attn{int(attn[0])}{int(attn[1])}"
        (out_dir / f"tables{suffix}.txt").write_text(text)
        (out_dir / f"tables{suffix}.csv").write_text(csv)


def _merge_reports(reports: list[EvalReport]) -> EvalReport:
    """Concatenate per-sample values across seeds (aggregate = pooled mean)."""
    merged = EvalReport(dataset_id=reports[0].dataset_id, arch=reports[0].arch,
                        provenance={"merged_from": len(reports)})
    for report in reports:
        for method, metrics in report.per_sample.items():
            for i in range(report.n_samples):
                merged.add_sample(method, {m: metrics[m][i] for m in METRIC_NAMES})
    return merged


if __name__ == "__main__":
    sys.exit(main())
