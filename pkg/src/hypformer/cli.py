"""``hypformer`` command-line entry point.

stdout carries only machine-readable payloads; diagnostics go to stderr.
Exit codes: 0 ok, 1 gradient check failed, 2 configuration error, 3 data
error, 4 numerical failure, 5 timer resolution too coarse.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError

EXIT_OK, EXIT_GRAD, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_TIMER = 0, 1, 2, 3, 4, 5


def _err(msg: str) -> None:
    print(f"hypformer: {msg}", file=sys.stderr)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _parse_bytes(text: str) -> int:
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    t = text.strip().lower().rstrip("b")
    if t and t[-1] in units:
        return int(float(t[:-1]) * units[t[-1]])
    return int(t)


def _parse_n_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("n-list needs positive integers")
    return values


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import DatasetError, load_dataset
    from .model import ConfigError, HypformerConfig
    from .training import complete_config, train

    try:
        config = HypformerConfig.load(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        dataset = load_dataset(args.data)
        config = complete_config(config, dataset)
    except DatasetError as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG

    started = _now()
    records = []
    try:
        out = open(args.out, "w")
    except OSError as exc:
        _err(f"cannot write metrics file: {exc}")
        return EXIT_DATA
    with out:
        def on_epoch(record):
            records.append(record)
            out.write(json.dumps(record) + "\n")
            out.flush()

        try:
            result = train(config, dataset, on_epoch=on_epoch)
        except NumericalError as exc:
            _err(f"numerical failure: {exc}")
            return EXIT_NUMERIC
        except DatasetError as exc:
            _err(f"data error: {exc}")
            return EXIT_DATA
    save_checkpoint(result.model, args.checkpoint)
    best = result.best_record
    _err(f"best epoch {best['epoch']}: val {best['val_metric']:.4f} test {best['test_metric']:.4f}")
    if args.manifest:
        manifest = {
            "config": config.to_dict(),
            "seed": config.seed,
            "version": f"v{__version__}",
            "started": started,
            "finished": _now(),
            "best_epoch": result.best_epoch,
            "records": records,
        }
        Path(args.manifest).write_text(json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .data import DatasetError, load_dataset
    from .training import complete_config, evaluate

    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        _err(f"checkpoint error: {exc}")
        return EXIT_CONFIG
    try:
        dataset = load_dataset(args.data)
        complete_config(model.config, dataset)
        metric = args.metric or model.config.eval_metric
        value = evaluate(model, dataset, args.split, metric)
    except DatasetError as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    print(json.dumps({"split": args.split, "metric_name": metric, "value": value}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from threadpoolctl import threadpool_limits

    from .bench import CSV_HEADER, TimerResolutionError, bench

    kinds = ["linear", "softmax"] if args.attention == "both" else [args.attention]
    if any(b <= a for a, b in zip(args.n_list, args.n_list[1:])):
        _err("--n-list must be strictly ascending")
        return EXIT_CONFIG
    dtype = np.float32 if args.dtype == "float32" else np.float64
    _err(json.dumps({"threads": args.threads, "dtype": args.dtype, "d": args.d, "reps": args.reps,
                     "mem_cap": args.mem_cap, "seed": args.seed, "version": f"v{__version__}"}))
    try:
        with threadpool_limits(args.threads):
            rows = bench(kinds, args.n_list, d=args.d, reps=args.reps, dtype=dtype,
                         mem_cap=args.mem_cap, seed=args.seed)
    except TimerResolutionError as exc:
        _err(str(exc))
        return EXIT_TIMER
    text = "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_checkgrad(args) -> int:
    from .checks import TOLERANCE, run_checks

    try:
        results = run_checks(args.cases, seed=args.seed)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    failed = False
    for name, err in results.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
    worst = max(results.values())
    print(f"max\t{worst:.3e}\t{'FAIL' if failed else 'ok'}")
    return EXIT_GRAD if failed else EXIT_OK


def cmd_gen_tree(args) -> int:
    from .data import gen_tree, save_dataset

    try:
        ds = gen_tree(args.depth, args.branching, args.dim, args.noise, seed=args.seed)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        save_dataset(ds, args.out)
    except OSError as exc:
        _err(f"cannot write dataset: {exc}")
        return EXIT_DATA
    _err(f"wrote {ds.n} nodes, {len(ds.edges)} edges, {ds.num_classes} classes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypformer", description="Hyperbolic Transformer on the Lorentz model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and stream per-epoch metrics")
    p.add_argument("--config", required=True, help="JSON config with HypformerConfig fields")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="metrics file (JSON lines)")
    p.add_argument("--checkpoint", required=True, help="where to write the best-validation checkpoint")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--manifest", default=None, help="optional run manifest (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--metric", default=None, choices=["accuracy", "binary_f1"], help="defaults to the config metric")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time forward+backward of one attention block")
    p.add_argument("--attention", default="both", choices=["linear", "softmax", "both"])
    p.add_argument("--n-list", type=_parse_n_list, default=[1024, 2048, 4096, 8192])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.add_argument("--mem-cap", type=_parse_bytes, default=2 << 30, help="skip softmax rows above this many bytes (e.g. 2G)")
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("checkgrad", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", default="all", help="all or a comma list of geometry,blocks,attention,model")
    p.set_defaults(func=cmd_checkgrad)

    p = sub.add_parser("gen-tree", help="write a synthetic tree dataset")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--branching", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--noise", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tree)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    code = args.func(args)
    if args.command in ("train", "bench", "checkgrad"):
        _err(f"{args.command} finished in {time.perf_counter() - t0:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
