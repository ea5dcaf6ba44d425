"""Command-line entry points."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import ExperimentConfig, load_config
from .experiment import ABLATIONS, run_ablation, run_experiment


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, action="append",
                        help="run this seed instead of the configured list (repeatable)")
    common.add_argument("--out", help="output directory (overrides config and $EQUAL_SEG_OUT)")
    common.add_argument("--budget", type=float, action="append",
                        help="budget fraction replacing the configured schedule (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="equal-seg", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    r = sub.add_parser("run", parents=[common], help="budget sweep over the configured strategies and seeds")
    r.add_argument("config")

    a = sub.add_parser("ablate", parents=[common], help="transform, loss-norm or region-size ablation")
    a.add_argument("kind", choices=ABLATIONS)
    a.add_argument("config")

    e = sub.add_parser("eval", help="mIoU and inconsistency of a saved model on a saved dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--transform", default="hflip", help="transform used for the inconsistency metric")

    g = sub.add_parser("gradcheck", help="central-difference check of every backward pass")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-4)

    d = sub.add_parser("gen-data", parents=[common], help="write the train/eval datasets of a config as .npz")
    d.add_argument("config")

    t = sub.add_parser("plot-data", help="print a strategies-by-budgets CSV of a results file")
    t.add_argument("results")
    t.add_argument("--metric", default="miou_mean",
                   choices=["miou_mean", "miou_std", "diversity_mean", "inconsistency_mean"])
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed:
        changes["seeds"] = list(args.seed)
    if args.budget:
        changes["budgets"] = sorted(args.budget)
    if args.out:
        changes["output"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _finish(table, where: str) -> int:
    failures = table.metadata.get("failures", [])
    if failures:
        print(f"error: {len(failures)} run(s) failed, first: {failures[0]['error']}", file=sys.stderr)
        return 1
    print(f"wrote {len(table.rows)} rows to {where}")
    return 0


def _cmd_run(args) -> int:
    cfg = _config(args)
    return _finish(run_experiment(cfg), str(Path(cfg.output) / "results.csv"))


def _cmd_ablate(args) -> int:
    cfg = _config(args)
    return _finish(run_ablation(args.kind, cfg), str(Path(cfg.output) / f"ablation_{args.kind}.csv"))


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .model import load_checkpoint
    from .trainer import evaluate, inconsistency
    from .transforms import TransformKind

    model = load_checkpoint(args.checkpoint)
    dataset, _ = load_dataset(args.dataset)
    m = evaluate(model, dataset)
    inc = inconsistency(model, dataset, TransformKind.parse(args.transform))
    print(f"miou {m.miou:.6f}")
    for c, v in enumerate(m.iou):
        print(f"iou_{c} {v:.6f}")
    print(f"inconsistency {inc:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradchecks import report

    ok, lines = report(range(args.seeds), tol=args.tol)
    print("\n".join(lines))
    return 0 if ok else 1


def _cmd_gen_data(args) -> int:
    from .data import generate_dataset, save_dataset

    cfg = _config(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    for name, seed, count in (("train", cfg.data_seed, cfg.count), ("eval", cfg.data_seed + 1, cfg.eval_count)):
        ds = generate_dataset(seed, count, cfg.height, cfg.width, cfg.in_channels, cfg.num_classes)
        save_dataset(ds, out / f"{name}_data.npz", seed, cfg.num_classes)
        print(f"wrote {count} images to {out / f'{name}_data.npz'}")
    return 0


def _cmd_plot_data(args) -> int:
    from .results import read_results

    table = read_results(args.results)
    budgets = table.budgets()
    wr = csv.writer(sys.stdout, lineterminator="\n")
    wr.writerow(["strategy"] + [f"{b:g}" for b in budgets])
    for strategy, vals in table.pivot(args.metric).items():
        wr.writerow([strategy] + [f"{vals.get(b, float('nan')):.6f}" for b in budgets])
    return 0


COMMANDS = {"run": _cmd_run, "ablate": _cmd_ablate, "eval": _cmd_eval, "gradcheck": _cmd_gradcheck,
            "gen-data": _cmd_gen_data, "plot-data": _cmd_plot_data}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:  # argparse: usage errors exit 2, --help exits 0
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
