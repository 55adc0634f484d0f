"""Command line entry point: ``loqt {train,estimate-memory,ablate,verify}``.

Exit codes: 0 success, 1 failed verification, 2 bad input (config, data,
architecture), 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

from ..memory import GB, METHODS as MEMORY_METHODS, MemoryModelError, estimate_model, resolve_arch
from ..quant import FormatError
from .config import ConfigError, dump_config, load_config
from .data import DataError

EXIT_FAIL, EXIT_INPUT, EXIT_DIVERGED = 1, 2, 3

_METHOD_ALIASES = {"full": "full_adam", "adam": "full_adam"}


def _threads() -> int:
    raw = os.environ.get("LOQT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LOQT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("LOQT_THREADS must be >= 1")
    return n


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    from . import checkpoint
    from .training import DivergenceError, Trainer, final_eval_loss

    cfg = load_config(args.config, args.override)
    out = Path(cfg.output_dir)
    trainer = Trainer(cfg)
    if args.resume:
        path = Path(args.resume) if args.resume != "last" else out / "last.ckpt"
        if not path.is_file():
            raise ConfigError(f"checkpoint {path} not found")
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            checkpoint.load(trainer, path, force=args.force)
        print(f"resumed at step {trainer.step}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    def on_step(t):
        if cfg.checkpoint_every and t.step % cfg.checkpoint_every == 0 and t.step < cfg.steps:
            checkpoint.save(t, out / "last.ckpt")

    try:
        records = trainer.run(metrics_path=out / "metrics.csv", on_step=on_step)
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    checkpoint.save(trainer, out / "final.ckpt")
    if records:
        print(f"final eval loss {final_eval_loss(records):.6f} after {trainer.step} steps")
    return 0


def cmd_estimate(args) -> int:
    arch = resolve_arch(args.arch, args.rank)
    methods = list(MEMORY_METHODS) if args.method == "all" else [
        _METHOD_ALIASES.get(args.method, args.method)
    ]
    for method in methods:
        if method not in MEMORY_METHODS:
            raise MemoryModelError(f"unknown method {args.method!r}")
        est = estimate_model(arch, method, nf4=args.nf4, adam8bit=args.adam8bit,
                             per_layer_grads=args.per_layer, double_quant=not args.no_double_quant)
        if args.jsonl:
            rec = {"arch": arch.name, "method": method, "nf4": args.nf4, "adam8bit": args.adam8bit,
                   "per_layer": args.per_layer, **est.as_dict(),
                   **{f"{k}_gb": v for k, v in est.gb().items()}}
            print(json.dumps(rec, sort_keys=True))
            continue
        print(f"{arch.name} {method}  nf4={args.nf4} adam8bit={args.adam8bit} per_layer={args.per_layer}")
        rows = (("weights", est.weights_elems, est.weight_bytes),
                ("optimizer", est.optimizer_elems, est.optimizer_bytes),
                ("gradients", est.gradient_elems, est.gradient_bytes))
        for label, elems, nbytes in rows:
            print(f"  {label:<10} {elems:>15,d} elems  {nbytes / GB:9.3f} GB")
        print(f"  {'total':<10} {'':>15}        {est.bytes_total / GB:9.3f} GB")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import run_ablation
    from .training import DivergenceError

    cfg = load_config(args.config, args.override)
    try:
        results = run_ablation(args.which, cfg, jobs=args.jobs, log=print)
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    width = max(len(k) for k in results)
    for name, loss in results.items():
        print(f"{name:<{width}}  {loss:.6f}")
    print(f"summary written to {Path(cfg.output_dir) / 'summary.csv'}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(args.only or None)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} properties hold")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loqt", description="Low-rank adapters over quantized weights.")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", nargs="?", const="last", default=None, metavar="CKPT",
                   help="resume from CKPT (default: <output_dir>/last.ckpt)")
    t.add_argument("--force", action="store_true", help="ignore a config digest mismatch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate-memory", help="analytic memory estimate")
    e.add_argument("--arch", required=True, help="60m|130m|350m|1b|7b|13b or a JSON file")
    e.add_argument("--method", default="loqt", help=f"{'|'.join(MEMORY_METHODS)}|full|all")
    e.add_argument("--rank", type=int, default=None)
    e.add_argument("--nf4", action="store_true")
    e.add_argument("--no-double-quant", action="store_true")
    e.add_argument("--adam8bit", action="store_true")
    e.add_argument("--per-layer", action="store_true", help="per-layer gradient updates")
    e.add_argument("--jsonl", "--json-lines", action="store_true", dest="jsonl")
    e.set_defaults(func=cmd_estimate)

    a = sub.add_parser("ablate", help="run an ablation matrix")
    a.add_argument("--which", required=True, choices=("compensation", "schedule", "rank"))
    a.add_argument("--config", required=True)
    a.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--jobs", type=int, default=1, help="variant runs in parallel processes")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="fast oracle suite")
    v.add_argument("--only", action="append", default=[], metavar="CHECK")
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (ConfigError, DataError, MemoryModelError, FormatError) as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
