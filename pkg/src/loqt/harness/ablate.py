"""Variant matrices for the compensation, schedule and rank ablations.

Each variant is the base config with a few keys changed.  Runs land in
``<output_dir>/<variant>/`` and a ``summary.csv`` collects final eval losses.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import save
from .config import RunConfig
from .training import Trainer, final_eval_loss

ABLATIONS = ("compensation", "schedule", "rank")
RANKS = (8, 16, 32, 64)
FIXED_INTERVALS = (200, 400, 1000)
SUMMARY_HEADER = ("variant", "final_eval_loss", "ppl", "steps")


def variants(which: str, base: RunConfig) -> dict[str, RunConfig]:
    """Named configs for one ablation; output dirs are left to the caller."""
    quant = base.replace(method="loqt")
    if which == "compensation":
        return {
            "naive": quant.replace(compensate=False, psi=1.0),
            "ec": quant.replace(compensate=True, psi=1.0),
            "ec_ei": quant.replace(compensate=True),
            "no_quant": base.replace(method="loqt-nq"),
        }
    if which == "schedule":
        out = {f"fixed_{t}": quant.replace(tau=t, psi=1.0) for t in FIXED_INTERVALS}
        out["exponential"] = quant
        return out
    if which == "rank":
        out = {}
        for r in RANKS:
            out[f"r{r}_quant"] = quant.replace(rank=r)
            out[f"r{r}_no_quant"] = base.replace(method="loqt-nq", rank=r)
        return out
    raise ValueError(f"unknown ablation {which!r}; choose from {ABLATIONS}")


def run_variant(cfg: RunConfig) -> float:
    out = Path(cfg.output_dir)
    trainer = Trainer(cfg)
    records = trainer.run(metrics_path=out / "metrics.csv")
    save(trainer, out / "final.ckpt")
    return final_eval_loss(records)


def run_ablation(which: str, base: RunConfig, jobs: int = 1, log=None) -> dict[str, float]:
    root = Path(base.output_dir)
    matrix = {name: cfg.replace(output_dir=str(root / name)) for name, cfg in variants(which, base).items()}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {name: pool.submit(run_variant, cfg) for name, cfg in matrix.items()}
            results = {name: f.result() for name, f in futures.items()}
    else:
        results = {}
        for name, cfg in matrix.items():
            results[name] = run_variant(cfg)
            if log is not None:
                log(f"{name}: final eval loss {results[name]:.4f}")
    write_summary(root / "summary.csv", results, base.steps)
    return results


def write_summary(path: Path, results: dict[str, float], steps: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for name, loss in results.items():
            w.writerow([name, repr(loss), repr(math.exp(min(loss, 700.0))), steps])


def read_summary(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["variant"]: float(row["final_eval_loss"]) for row in csv.DictReader(fh)}
