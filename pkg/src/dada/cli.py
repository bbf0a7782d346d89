"""Command line entry points.

Subcommands: gen-data, train, eval, ablate, report. Exit codes: 0 on
success, 2 for config errors, 3 for data errors, 4 for numerical aborts.
Setting DADA_DETERMINISTIC=1 forces deterministic mode everywhere.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import config as configmod
from . import report as reportmod
from .autodiff import NonFiniteLossError, deterministic_requested
from .config import ConfigError
from .metrics import EvalReport, evaluate_model
from .model import load_checkpoint
from .synthdata import (PrivilegedDataError, SceneDataset, default_style,
                        generate_dataset)
from .trainer import ABLATION_PRESETS, TrainingAbort, run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    pass


def _build_parser():
    parser = argparse.ArgumentParser(prog="dada",
                                     description="depth-aware domain adaptation, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene spec config file")
    p.add_argument("--domain", required=True, choices=["source", "target"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--model-cfg", required=True)
    p.add_argument("--train-cfg", required=True)
    p.add_argument("--ablation", required=True, choices=sorted(ABLATION_PRESETS))
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val", default=None,
                   help="labeled validation set for metric snapshots")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline-report", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run ablation presets x seeds")
    p.add_argument("--model-cfg", required=True)
    p.add_argument("--train-cfg", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per preset")
    p.add_argument("--presets", default=",".join(sorted(ABLATION_PRESETS)),
                   help="comma-separated subset of S1..S7")
    p.add_argument("--fractions", default=None,
                   help="comma-separated source fractions for the sweep")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("report", help="re-aggregate a suite directory")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", default=None, help="defaults to the suite directory")
    return parser


def _cmd_gen_data(args) -> int:
    spec = configmod.load_scene_spec(args.spec)
    style = default_style(args.domain, spec.num_classes)
    generate_dataset(spec, style, args.seed, args.count, args.out)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def _open_dataset(path, role):
    try:
        return SceneDataset.from_dir(path, role=role)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc


def _cmd_train(args) -> int:
    model_cfg = configmod.load_model_config(args.model_cfg)
    train_cfg = configmod.load_train_config(args.train_cfg)
    source = _open_dataset_with_fraction(args.source, "source", train_cfg.source_fraction)
    target = _open_dataset(args.target, "target-train")
    val = _open_dataset(args.val, "val") if args.val else None
    started = time.time()
    summary = run_training(model_cfg, train_cfg, ABLATION_PRESETS[args.ablation],
                           source, target, args.out, val=val,
                           deterministic=args.deterministic or deterministic_requested())
    reportmod.write_experiment_manifest(
        args.out, command="train",
        configs={"model": dataclasses.asdict(model_cfg),
                 "train": dataclasses.asdict(train_cfg),
                 "ablation": args.ablation},
        dataset_dirs={"source": args.source, "target": args.target, "val": args.val},
        seeds=[train_cfg.seed], started=started, finished=time.time())
    print(json.dumps({k: summary[k] for k in ("checkpoint", "metrics", "iterations")
                      | ({"final_miou"} if "final_miou" in summary else set())},
                     sort_keys=True))
    return EXIT_OK


def _open_dataset_with_fraction(path, role, fraction):
    try:
        return SceneDataset.from_dir(path, role=role, fraction=fraction)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc


def _cmd_eval(args) -> int:
    try:
        net = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    data = _open_dataset(args.data, "val")
    baseline = None
    if args.baseline_report:
        try:
            baseline = EvalReport.load(args.baseline_report).per_image_miou
        except (FileNotFoundError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load baseline report: {exc}") from exc
    report = evaluate_model(net, data, baseline_per_image=baseline)
    report.meta["checkpoint"] = str(args.checkpoint)
    report.meta["data"] = str(args.data)
    report.save(args.out)
    print(json.dumps({"miou": report.miou,
                      "negative_transfer_rate": report.negative_transfer_rate},
                     sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    model_cfg = configmod.load_model_config(args.model_cfg)
    train_cfg = configmod.load_train_config(args.train_cfg)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    for p in presets:
        if p not in ABLATION_PRESETS:
            raise ConfigError(f"unknown preset {p!r}")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = [train_cfg.seed + i for i in range(args.seeds)]
    fractions = None
    if args.fractions:
        fractions = tuple(float(f) for f in args.fractions.split(","))
    for d in (args.source, args.target, args.val):
        if not (Path(d) / "manifest.json").exists():
            raise DataError(f"no manifest.json under {d}")
    suite = reportmod.run_ablation_suite(
        model_cfg, train_cfg, args.source, args.target, args.val, args.out,
        presets=presets, seeds=seeds, fractions=fractions,
        deterministic=args.deterministic or deterministic_requested(),
        workers=args.workers)
    failed = [c for c in suite["cells"] if c["status"] != "ok"]
    print(f"suite complete: {len(suite['cells']) - len(failed)} ok, {len(failed)} failed; "
          f"table at {Path(args.out) / 'ablation_table.csv'}")
    return EXIT_OK


def _cmd_report(args) -> int:
    cells = reportmod.load_cells(args.suite)
    if not cells:
        raise DataError(f"no completed cells under {args.suite}")
    presets = sorted({c["setup"] for c in cells if c["fraction"] == 1.0})
    seeds = sorted({c["seed"] for c in cells})
    fractions = sorted({c["fraction"] for c in cells if c["fraction"] != 1.0})
    if fractions and 1.0 not in fractions:
        fractions = fractions + [1.0]
    reportmod.aggregate_suite(cells, args.out or args.suite, presets=presets,
                              seeds=seeds, fractions=fractions or None)
    print(f"aggregated {len(cells)} cells")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PrivilegedDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAbort, NonFiniteLossError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
