"""Command-line driver.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import dataio, pipeline
from .errors import DataError, NumericalError
from .metrics import reports_to_csv
from .mfmodel import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_train_seed(cfg, seed):
    if seed is None:
        return cfg
    return cfg.replace(train=dataclasses.replace(cfg.train, seed=seed))


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    cfg = _with_train_seed(cfg, args.seed)
    ds_a, req = pipeline.prepare(cfg, args.forget)
    model, tlog, secs = pipeline.run_train(cfg, ds_a, pipeline.initial_model(cfg, ds_a))
    save_checkpoint(model, out / "original.ckpt")
    tlog.write_csv(out / "original_trainlog.csv")
    pipeline.write_manifest(out, cfg, "train", ["original.ckpt", "original_trainlog.csv"],
                            {"runtime_seconds": secs})
    print(f"trained Original in {secs:.2f}s -> {out / 'original.ckpt'}")


def cmd_make_forget(args, cfg):
    out = _out_dir(args, cfg)
    if args.seed is not None:
        cfg = cfg.replace(forget=dataclasses.replace(cfg.forget, seed=args.seed))
    ds_a, req = pipeline.prepare(cfg)
    dataio.write_forget_request(req, ds_a, out / "forget.tsv")
    pipeline.write_manifest(out, cfg, "make-forget", ["forget.tsv"])
    print(f"{len(req)} pairs from {len(req.forgetting_users)} users -> {out / 'forget.tsv'}")


def cmd_retrain(args, cfg):
    out = _out_dir(args, cfg)
    ds_a, req = pipeline.prepare(cfg, args.forget)
    ds_r = dataio.apply_forget(ds_a, req)
    stem = "retrain" if args.seed is None else f"retrain_seed{args.seed}"
    init = pipeline.initial_model(cfg, ds_a, args.seed)
    model, tlog, secs = pipeline.run_train(cfg, ds_r, init, seed=args.seed)
    save_checkpoint(model, out / f"{stem}.ckpt")
    tlog.write_csv(out / f"{stem}_trainlog.csv")
    pipeline.write_manifest(out, cfg, "retrain", [f"{stem}.ckpt", f"{stem}_trainlog.csv"],
                            {"runtime_seconds": secs, "seed_override": args.seed})
    print(f"retrained in {secs:.2f}s -> {out / (stem + '.ckpt')}")


def cmd_warmstart(args, cfg):
    out = _out_dir(args, cfg)
    cfg = _with_train_seed(cfg, args.seed)
    ds_a, req = pipeline.prepare(cfg, args.forget)
    ds_r = dataio.apply_forget(ds_a, req)
    original = load_checkpoint(args.original)
    model, tlog, secs = pipeline.run_train(cfg, ds_r, original)
    save_checkpoint(model, out / "warmstart.ckpt")
    tlog.write_csv(out / "warmstart_trainlog.csv")
    pipeline.write_manifest(out, cfg, "warmstart", ["warmstart.ckpt", "warmstart_trainlog.csv"],
                            {"runtime_seconds": secs})
    print(f"warm-started in {secs:.2f}s -> {out / 'warmstart.ckpt'}")


def cmd_unlearn(args, cfg):
    out = _out_dir(args, cfg)
    ds_a, req = pipeline.prepare(cfg, args.forget)
    original = load_checkpoint(args.original)
    solver = pipeline.SOLVER_ALIASES[args.solver] if args.solver else cfg.unlearn.inner_solver
    model, ulog, secs = pipeline.run_unlearn(cfg, ds_a, req, original, solver, args.workers)
    save_checkpoint(model, out / f"unlearn_{solver}.ckpt")
    ulog.write_csv(out / f"unlearn_{solver}_log.csv")
    pipeline.write_manifest(out, cfg, "unlearn", [f"unlearn_{solver}.ckpt", f"unlearn_{solver}_log.csv"],
                            {"runtime_seconds": secs, "solver": solver})
    print(f"unlearned {len(req)} pairs with {solver} in {secs:.3f}s "
          f"({len(ulog.losses)} passes) -> {out / f'unlearn_{solver}.ckpt'}")


def _named(spec: str):
    name, sep, path = spec.partition("=")
    return (name, path) if sep else (Path(spec).stem, spec)


def cmd_eval(args, cfg):
    out = _out_dir(args, cfg)
    ds_a, req = pipeline.prepare(cfg, args.forget)
    ds_r = dataio.apply_forget(ds_a, req)
    gold = load_checkpoint(args.gold)
    reports = []
    for spec in args.models:
        name, path = _named(spec)
        reports += pipeline.evaluate(name, load_checkpoint(path), gold, ds_r, req, cfg.eval)
    written = pipeline.write_reports(out, reports, tuple(cfg.eval.ks), title="Evaluation")
    pipeline.write_manifest(out, cfg, "eval", written, {"models": list(args.models), "gold": args.gold})
    sys.stdout.write(reports_to_csv(reports, tuple(cfg.eval.ks), timing=False))


def cmd_bench(args, cfg):
    out = _out_dir(args, cfg)
    cfg = _with_train_seed(cfg, args.seed)
    if args.solver:
        cfg = cfg.replace(bench=dataclasses.replace(cfg.bench, solvers=(pipeline.SOLVER_ALIASES[args.solver],)))
    reports = pipeline.run_bench(cfg, out, args.workers, args.repeats)
    sys.stdout.write((out / "eval.md").read_text(encoding="utf-8"))
    return reports


COMMANDS = {
    "train": (cmd_train, "train the Original model on D_a"),
    "make-forget": (cmd_make_forget, "write a forget request file"),
    "retrain": (cmd_retrain, "retrain from scratch on D_r (Retrain*, with --seed)"),
    "warmstart": (cmd_warmstart, "first-order fine-tune on D_r from the Original model"),
    "unlearn": (cmd_unlearn, "alternating second-order unlearning"),
    "eval": (cmd_eval, "evaluate checkpoints against a retrained model"),
    "bench": (cmd_bench, "run every method and emit the consistency/accuracy/efficiency tables"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alteraser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config (defaults used when omitted)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="seed override for the stage")
        p.add_argument("--workers", type=int, help="threads for per-block solves")
        p.add_argument("--solver", choices=["ah", "hf", "first-order"])
        if name in ("train", "retrain", "warmstart", "unlearn", "eval"):
            p.add_argument("--forget", required=name != "train", help="forget request file")
        if name in ("warmstart", "unlearn"):
            p.add_argument("--original", required=True, help="Original model checkpoint")
        if name == "eval":
            p.add_argument("--gold", required=True, help="Retrain checkpoint (RBO reference)")
            p.add_argument("models", nargs="+", help="checkpoints as PATH or NAME=PATH")
        if name == "bench":
            p.add_argument("--repeats", type=int, help="repetitions with shifted seeds")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    fn = COMMANDS[args.command][0]
    stage = args.command
    try:
        cfg = pipeline.load_config(args.config) if args.config else pipeline.config_from_dict({})
        fn(args, cfg)
    except pipeline.ConfigError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure [{stage}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
