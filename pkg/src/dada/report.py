"""Ablation suite running, aggregation and reporting.

A suite is a grid of independent training cells (preset x seed, plus an
optional source-fraction sweep of the full method). Cells run in worker
processes; the aggregator only reads each completed cell's eval report, so
table entries are exactly the numbers a standalone evaluation of the same
checkpoint produces. Failures are recorded per cell and the suite carries
on.
"""

import csv
import dataclasses
import json
import hashlib
import multiprocessing as mp
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__ as artifact_version
from .metrics import EvalReport, negative_transfer_rate
from .model import ModelConfig
from .synthdata import SceneDataset
from .trainer import ABLATION_PRESETS, TrainConfig, run_training

DEFAULT_FRACTIONS = (0.1, 0.3, 0.5, 0.7, 1.0)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_experiment_manifest(out_dir, command: str, configs: dict, dataset_dirs: dict,
                              seeds, started: float, finished: float) -> Path:
    """The single manifest every output directory carries."""
    manifest = {
        "command": command,
        "artifact_version": artifact_version,
        "config_digests": {
            name: hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode())
            .hexdigest()[:16]
            for name, cfg in configs.items()
        },
        "configs": configs,
        "dataset_manifests": {
            name: {"path": str(Path(d) / "manifest.json"),
                   "digest": _file_digest(Path(d) / "manifest.json")}
            for name, d in dataset_dirs.items() if d is not None
        },
        "seeds": list(seeds),
        "started": started,
        "finished": finished,
    }
    path = Path(out_dir) / "experiment.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _run_cell(args: dict) -> dict:
    """Worker entry: one training cell. Returns a JSON-able cell record."""
    import torch
    torch.set_num_threads(1)
    try:
        model_cfg = ModelConfig(**{**args["model_cfg"],
                                   "backbone_channels": tuple(args["model_cfg"]["backbone_channels"]),
                                   "input_size": tuple(args["model_cfg"]["input_size"])})
        tc = dict(args["train_cfg"])
        tc["disc_adam_betas"] = tuple(tc["disc_adam_betas"])
        train_cfg = TrainConfig(**tc)
        setup = ABLATION_PRESETS[args["setup"]]
        source = SceneDataset.from_dir(args["source_dir"], role="source",
                                       fraction=train_cfg.source_fraction)
        target = SceneDataset.from_dir(args["target_dir"], role="target-train")
        val = SceneDataset.from_dir(args["val_dir"], role="val") if args["val_dir"] else None
        summary = run_training(model_cfg, train_cfg, setup, source, target,
                               args["out_dir"], val=val,
                               deterministic=args["deterministic"])
        cell = {**args["cell_key"], "status": "ok", "out_dir": args["out_dir"],
                "miou": summary.get("final_miou"),
                "eval_report": summary.get("eval_report"),
                "guard": summary["guard"]}
    except Exception as exc:  # recorded per cell; the suite continues
        cell = {**args["cell_key"], "status": "failed", "out_dir": args["out_dir"],
                "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}
    try:
        Path(args["out_dir"]).mkdir(parents=True, exist_ok=True)
        (Path(args["out_dir"]) / "cell.json").write_text(
            json.dumps(cell, indent=1, sort_keys=True))
    except OSError:
        pass
    return cell


def load_cells(suite_dir) -> list:
    """Collect completed cell records from a suite directory."""
    cells = []
    for path in sorted(Path(suite_dir).glob("cells/*/cell.json")):
        cells.append(json.loads(path.read_text()))
    return cells


def _cell_args(model_cfg, train_cfg, setup_name, seed, fraction, dirs, out_dir,
               deterministic):
    cfg = dataclasses.replace(train_cfg, seed=seed, source_fraction=fraction)
    tag = f"{setup_name}_seed{seed}"
    if fraction != 1.0:
        tag += f"_frac{fraction:g}"
    return {
        "model_cfg": dataclasses.asdict(model_cfg),
        "train_cfg": dataclasses.asdict(cfg),
        "setup": setup_name,
        "source_dir": str(dirs["source"]),
        "target_dir": str(dirs["target"]),
        "val_dir": str(dirs["val"]) if dirs.get("val") else None,
        "out_dir": str(Path(out_dir) / "cells" / tag),
        "deterministic": deterministic,
        "cell_key": {"setup": setup_name, "seed": seed, "fraction": fraction},
    }


def run_ablation_suite(model_cfg: ModelConfig, train_cfg: TrainConfig,
                       source_dir, target_dir, val_dir, out_dir,
                       presets=tuple(ABLATION_PRESETS), seeds=(0,),
                       fractions=None, deterministic=False, workers=1,
                       full_method="S7", baseline="S1") -> dict:
    """Train/evaluate presets x seeds (and an optional fraction sweep of the
    full method), then emit CSV tables and plots. Returns the suite record."""
    if not seeds:
        raise ValueError("need at least one seed")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dirs = {"source": source_dir, "target": target_dir, "val": val_dir}

    jobs = [_cell_args(model_cfg, train_cfg, name, seed, 1.0, dirs, out, deterministic)
            for name in presets for seed in seeds]
    for frac in (fractions or ()):
        if frac == 1.0 and full_method in presets:
            continue  # identical to the full-method preset cells
        for seed in seeds:
            jobs.append(_cell_args(model_cfg, train_cfg, full_method, seed, frac,
                                   dirs, out, deterministic))

    if workers > 1:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]

    suite = aggregate_suite(cells, out, presets=presets, seeds=seeds,
                            fractions=fractions, full_method=full_method,
                            baseline=baseline)
    finished = time.time()
    write_experiment_manifest(
        out, command="ablate",
        configs={"model": dataclasses.asdict(model_cfg),
                 "train": dataclasses.asdict(train_cfg),
                 "presets": list(presets)},
        dataset_dirs=dirs, seeds=seeds, started=started, finished=finished)
    return suite


def _cell_report(cell) -> EvalReport:
    return EvalReport.load(cell["eval_report"])


def aggregate_suite(cells, out_dir, presets, seeds, fractions=None,
                    full_method="S7", baseline="S1") -> dict:
    """Build tables/plots from completed cell records (reads their reports)."""
    out = Path(out_dir)
    by_key = {(c["setup"], c["seed"], c["fraction"]): c for c in cells}

    def ok(setup, seed, fraction=1.0):
        c = by_key.get((setup, seed, fraction))
        return c if c and c["status"] == "ok" else None

    # negative transfer of every adapted cell vs the source-only baseline
    for c in cells:
        c["negative_transfer_rate"] = None
        base = ok(baseline, c["seed"])
        if c["status"] != "ok" or c["setup"] == baseline or base is None:
            continue
        adapted = _cell_report(c).per_image_miou
        base_scores = _cell_report(base).per_image_miou
        if len(adapted) == len(base_scores):
            c["negative_transfer_rate"] = negative_transfer_rate(adapted, base_scores)

    rows = []
    class_names = None
    for name in presets:
        good = [ok(name, s) for s in seeds]
        good = [c for c in good if c]
        row = {"setup": name, "n_ok": len(good), "n_seeds": len(seeds)}
        if good:
            reports = [_cell_report(c) for c in good]
            mious = [r.miou for r in reports]
            row.update(miou_mean=float(np.mean(mious)),
                       miou_median=float(np.median(mious)),
                       miou_min=float(np.min(mious)), miou_max=float(np.max(mious)))
            n_cls = len(reports[0].per_class_iou)
            if class_names is None:
                class_names = [f"class{i}" for i in range(n_cls)]
            for i in range(n_cls):
                vals = [r.per_class_iou[i] for r in reports if r.per_class_iou[i] is not None]
                row[f"iou_{i}"] = float(np.mean(vals)) if vals else None
            ntrs = [c["negative_transfer_rate"] for c in good
                    if c["negative_transfer_rate"] is not None]
            row["ntr_median"] = float(np.median(ntrs)) if ntrs else None
        rows.append(row)

    frac_rows = []
    for frac in (fractions or ()):
        good = [ok(full_method, s, frac) for s in seeds]
        good = [c for c in good if c]
        fr = {"fraction": frac, "n_ok": len(good)}
        if good:
            mious = [_cell_report(c).miou for c in good]
            fr.update(miou_median=float(np.median(mious)),
                      miou_min=float(np.min(mious)), miou_max=float(np.max(mious)))
        frac_rows.append(fr)

    _write_csv(out / "ablation_table.csv", rows)
    if frac_rows:
        _write_csv(out / "fraction_table.csv", frac_rows)
    _plot_ablation(out / "ablation_miou.png", rows)
    if frac_rows:
        _plot_fractions(out / "fraction_miou.png", frac_rows)

    suite = {"cells": cells, "table": rows, "fraction_table": frac_rows,
             "monotonic_fraction_sweep": _is_monotone(frac_rows)}
    (out / "suite.json").write_text(json.dumps(suite, indent=1, sort_keys=True))
    return suite


def _is_monotone(frac_rows) -> bool:
    vals = [r.get("miou_median") for r in sorted(frac_rows, key=lambda r: r["fraction"])
            if r.get("miou_median") is not None]
    return all(a <= b + 1e-12 for a, b in zip(vals, vals[1:])) if len(vals) > 1 else True


def _write_csv(path, rows) -> None:
    if not rows:
        return
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in keys})


def _plot_ablation(path, rows) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["setup"] for r in rows]
    means = [r.get("miou_mean") or 0.0 for r in rows]
    lo = [m - (r.get("miou_min") or m) for m, r in zip(means, rows)]
    hi = [(r.get("miou_max") or m) - m for m, r in zip(means, rows)]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, means, yerr=[lo, hi], capsize=4, color="#4878d0")
    ax.set_ylabel("target mIoU")
    ax.set_title("ablation setups (mean, min-max over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_fractions(path, rows) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(rows, key=lambda r: r["fraction"])
    x = [r["fraction"] for r in rows]
    y = [r.get("miou_median") or 0.0 for r in rows]
    ylo = [r.get("miou_min") or 0.0 for r in rows]
    yhi = [r.get("miou_max") or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, y, "o-", color="#4878d0")
    ax.fill_between(x, ylo, yhi, alpha=0.2, color="#4878d0")
    ax.set_xlabel("source fraction")
    ax.set_ylabel("target mIoU (median)")
    ax.set_title("full method vs fraction of source data")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
