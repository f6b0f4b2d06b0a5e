"""Command-line entry point (``lds-svae``)."""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import torch

from ..svae.checkpoint import atomic_write_text, load_checkpoint
from .bench import benchmark_runtime
from .config import ConfigError, EvalConfig, ExperimentConfig, load_config
from .io import read_dataset, write_dataset
from .presets import PRESETS, preset
from .runner import dumps, evaluate, forecast, generate, run_ablation, run_experiment


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _config(args) -> ExperimentConfig:
    if getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    return cfg


def _emit(doc, out: str | None) -> None:
    text = dumps(doc)
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def cmd_generate(args) -> None:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides({"dataset.seed": args.seed})
    write_dataset(generate(cfg), args.out)
    print(f"wrote {cfg.kind} dataset to {args.out}")


def _run_configs(args) -> list[tuple[ExperimentConfig, Path]]:
    cfg = _config(args)
    if getattr(args, "no_mask", False):
        cfg = cfg.with_overrides({"train.mask_fraction": 0.0})
    points = cfg.grid_points()
    out = Path(args.out)
    if len(points) == 1:
        return [(points[0], out)]
    return [(p, out / f"grid_{i:03d}") for i, p in enumerate(points)]


def cmd_train(args) -> None:
    data = read_dataset(args.data) if args.data else None
    for cfg, out in _run_configs(args):
        if args.ablation:
            summary = run_ablation(cfg, out, data, args.threads)
            print(dumps(summary["runs"]), end="")
        else:
            res = run_experiment(cfg, out, data, args.threads)
            print(dumps(res.final), end="")


def _eval_config(args, ckpt) -> EvalConfig:
    base = ckpt.extra.get("experiment", {}).get("eval", {})
    fields = {**base, **{k: v for k, v in {
        "split": args.split,
        "prefix": getattr(args, "prefix", None),
        "horizon": getattr(args, "horizon", None),
        "trajectories": getattr(args, "trajectories", None),
        "seed": args.seed,
    }.items() if v is not None}}
    return EvalConfig(**fields)


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    _emit(evaluate(ckpt.model, ds, _eval_config(args, ckpt), threads=args.threads), args.out)


def cmd_predict(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    _emit(forecast(ckpt.model, ds, _eval_config(args, ckpt)), args.out)


BENCH_FIELDS = ("T", "backend", "median_s", "min_s", "max_s", "reps", "loss", "grad_norm")


def cmd_bench(args) -> None:
    res = benchmark_runtime(_ints(args.lengths), _names(args.backends), reps=args.reps, warmup=args.warmup,
                            batch=args.batch, seed=args.seed or 0, threads=args.threads)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(BENCH_FIELDS)
    for row in res.rows:
        w.writerow(row)
    print(f"# cores={res.cores} threads={res.threads} batch={res.batch}")
    print(buf.getvalue(), end="")
    if args.out:
        out = Path(args.out)
        # losses are reproducible; timings are measurements and live apart
        losses = io.StringIO()
        lw = csv.writer(losses)
        lw.writerow(("T", "backend", "loss", "grad_norm"))
        for row in res.rows:
            lw.writerow((row.T, row.backend, row.loss, row.grad_norm))
        atomic_write_text(out / "bench_losses.csv", losses.getvalue())
        atomic_write_text(out / "bench_timings.csv", buf.getvalue())
        atomic_write_text(out / "bench_env.json", dumps({"cores": res.cores, "threads": res.threads,
                                                         "batch": res.batch}))


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    src = parser.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON config file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in desk-scale config")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="torch intra-op threads and scan workers")

    p = argparse.ArgumentParser(prog="lds-svae", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate a dataset")
    _add_config_args(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train, evaluate and forecast")
    _add_config_args(t)
    t.add_argument("--data", help="dataset directory (generated from the config when omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--no-mask", action="store_true", help="train with mask fraction 0")
    t.add_argument("--ablation", action="store_true", help="paired runs with mask fractions 0.4 and 0")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default=None)
    e.add_argument("--out", default=None, help="write JSON here instead of stdout")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("predict", parents=[common], help="forecast held-out frames")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--split", default=None)
    f.add_argument("--prefix", type=int, default=50)
    f.add_argument("--horizon", type=int, default=50)
    f.add_argument("--trajectories", type=int, default=200)
    f.add_argument("--out", default=None, help="write JSON here instead of stdout")
    f.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", parents=[common], help="time one ELBO-gradient iteration")
    b.add_argument("--lengths", default="1024,4096,16384,65536")
    b.add_argument("--backends", default="seq,par")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--batch", type=int, default=10)
    b.add_argument("--out", default=None, help="directory for CSV/JSON outputs")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.threads = getattr(args, "threads", None)
    if args.threads is not None:
        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
