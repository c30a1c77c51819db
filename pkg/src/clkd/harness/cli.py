"""``clkd`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import models
from ..errors import ClkdError, ConfigError, FormatError, TrainingError
from ..trainer import evaluate_topk
from . import experiments
from .config import ExperimentConfig, parse_value
from .gradcheck import format_rows, gradcheck
from .report import RunReport

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("clkd")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="output directory (overrides run.out_dir)")
    common.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides run.seeds)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config value, e.g. distill.beta=1.0 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="clkd", description="Class-aware logit distillation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="distill one student per seed")
    s.add_argument("config")
    s = sub.add_parser("ablation", parents=[common], help="the five-variant loss ablation")
    s.add_argument("config")
    s = sub.add_parser("sweep", parents=[common], help="grid over one config path")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="dotted config path, e.g. distill.nu")
    s.add_argument("--values", required=True, help="comma-separated values, e.g. 0,0.1,0.2")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of every loss")
    s = sub.add_parser("export-embeddings", parents=[common], help="dump tapped test-set features as CSV")
    s.add_argument("config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model", choices=("student", "teacher"), default="student")
    s.add_argument("--tap", default="penultimate")
    s = sub.add_parser("linear-probe", parents=[common], help="linear head on frozen features of a new task")
    s.add_argument("config")
    s.add_argument("--checkpoint", help="probe this checkpoint instead of training per seed")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    for item in args.set:
        path, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("expected PATH=VALUE", item)
        cfg = cfg.override(path.strip(), parse_value(value.strip()))
    if args.seeds:
        cfg = cfg.override("run.seeds", args.seeds)
    if args.out_dir:
        cfg = cfg.override("run.out_dir", str(Path(args.out_dir).resolve()))
    return cfg


def _summary(reports: dict[str, RunReport]) -> str:
    lines = [f"{'run':<28} {'median top-1':>12}  per seed"]
    for name, rep in reports.items():
        best = rep.best_top1()
        vals = [best[s] for s in sorted(best)]
        med = float(np.median(vals)) if vals else float("nan")
        lines.append(f"{name:<28} {100 * med:>11.2f}%  " + " ".join(f"{100 * v:.1f}" for v in vals))
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = load_config(args)
    rep = experiments.run(cfg, threads=args.threads)
    print(_summary({cfg.run.name: rep}))
    print(f"wrote {cfg.out_dir / 'report.csv'}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = load_config(args)
    reps = experiments.ablation(cfg, threads=args.threads)
    print(_summary(reps))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    values = parse_value(f"[{args.values}]")
    if not isinstance(values, list) or not values:
        raise ConfigError(f"cannot parse value list {args.values!r}", "--values")
    reps = experiments.sweep(cfg, args.param, values, threads=args.threads)
    print(_summary({f"{args.param}={v!r}": r for v, r in reps.items()}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradcheck()
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else 1


def _model(cfg: ExperimentConfig, which: str):
    return cfg.student.spec if which == "student" else cfg.teacher.spec


def cmd_export(args) -> int:
    cfg = load_config(args)
    spec = _model(cfg, args.model)
    params = models.load(args.checkpoint)
    if args.tap not in spec.tap_ids():
        raise ConfigError(f"unknown tap {args.tap!r}; choose from {spec.tap_ids()}", "--tap")
    _, test = cfg.load_data()
    experiments.export_embeddings(spec, params, test, args.tap, args.out)
    print(f"wrote {len(test)} rows to {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = load_config(args)
    pr = cfg.probe
    spec = _model(cfg, pr.model)
    if pr.tap not in spec.tap_ids():
        raise ConfigError(f"unknown tap {pr.tap!r}", "probe.tap")
    train, test = cfg.load_data()
    p_train, p_test = experiments.probe_datasets(cfg)
    if args.checkpoint:
        bodies = {cfg.run.seeds[0]: models.load(args.checkpoint)}
    elif pr.model == "teacher":
        bodies = {s: experiments.train_teacher(cfg, s, train) for s in cfg.run.seeds}
    else:
        rep_dir = cfg.out_dir / "probe"
        experiments.run(cfg, threads=args.threads, out_dir=rep_dir)
        bodies = {s: models.load(rep_dir / f"student_seed{s}.ckpt") for s in cfg.run.seeds}
    lines = ["seed,model_top1,probe_top1"]
    for seed, body in bodies.items():
        own = evaluate_topk(spec, body, test, 1)
        acc = experiments.linear_probe(spec, body, pr.tap, p_train, p_test, pr.optim, pr.epochs, pr.schedule,
                                       pr.batch_size, seed + pr.seed_offset)
        lines.append(f"{seed},{own!r},{acc!r}")
        print(f"seed {seed}: model top-1 {100 * own:.2f}%  probe top-1 {100 * acc:.2f}%")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    models.atomic_write(cfg.out_dir / "probe.csv", ("\n".join(lines) + "\n").encode("utf-8"))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablation": cmd_ablation, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "export-embeddings": cmd_export, "linear-probe": cmd_probe}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ClkdError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
