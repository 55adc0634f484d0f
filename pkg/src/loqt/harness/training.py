"""Training loop shared by all methods, with metrics CSV output."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..engine import AdapterPolicy, EngineError, MergeSchedule, StepRecord, train_step
from ..nn import DecoderConfig, DecoderLM, MLP, Linear, merged_weight_grads, orientation_for
from ..optim import Adam, GaLoreState, galore_step, refresh_projector
from .config import RunConfig
from .data import EVAL_STREAM, RegressionTask, lm_batch, load_corpus, split_corpus

CSV_HEADER = ("step", "loss", "eval_loss", "ppl", "lr", "merge", "comp_residual", "ms")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"loss diverged at step {step}{': ' + detail if detail else ''}")
        self.step = step


def lr_at(step: int, total: int, peak: float, warmup: float = 0.1, floor: float = 0.1) -> float:
    """Linear warmup over the first ``warmup`` fraction, then cosine to ``floor * peak``."""
    n_warm = int(round(warmup * total))
    if step < n_warm:
        return peak * (step + 1) / n_warm
    span = max(total - 1 - n_warm, 1)
    progress = min(max((step - n_warm) / span, 0.0), 1.0)
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class MetricsRecord:
    step: int
    loss: float
    eval_loss: Optional[float]
    lr: float
    merge: bool
    comp_residual: Optional[float]
    ms: float = 0.0

    @property
    def ppl(self) -> Optional[float]:
        if self.eval_loss is None:
            return None
        return math.exp(min(self.eval_loss, 700.0))

    def row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.step), fmt(self.loss), fmt(self.eval_loss), fmt(self.ppl), fmt(self.lr),
            "1" if self.merge else "0", fmt(self.comp_residual), f"{self.ms:.3f}",
        ]


def format_rows(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


class Trainer:
    """Owns the model, optimizer state and data for one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        self.step = 0
        self.schedule = MergeSchedule(cfg.tau, cfg.psi, cfg.cap, cfg.literal_schedule)
        quant = cfg.method in ("loqt", "lora-frozen")
        self.policy = AdapterPolicy(
            rank=cfg.rank,
            scale=cfg.scale,
            quantize_w=quant and cfg.quantize_w,
            quantize_p=quant and cfg.quantize_p,
            double_quant=cfg.double_quant,
            compensate=cfg.compensate,
            comp_iters=cfg.comp_iters,
            reset_adam=cfg.reset_adam,
            merge=cfg.method != "lora-frozen",
        )
        self.optimizer = Adam(cfg.beta1, cfg.beta2, cfg.eps)
        self.galore: dict[str, GaLoreState] = {}
        if cfg.task == "char-lm":
            data = load_corpus(cfg.corpus or None)
            self.train_data, self.eval_data = split_corpus(data)
            if len(self.eval_data) < cfg.context + 1:
                from .data import DataError

                raise DataError("corpus too small for the evaluation split")
            mcfg = DecoderConfig(256, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.context)
            self.model = DecoderLM(mcfg, seed=cfg.seed)
            self._eval = [
                lm_batch(self.eval_data, cfg.context, cfg.batch_size, cfg.seed, EVAL_STREAM + i)
                for i in range(cfg.eval_batches)
            ]
        else:
            dims = cfg.dims()
            self.task = RegressionTask(dims[0], cfg.seed, cfg.noise)
            self.model = MLP(dims, cfg.activation, seed=cfg.seed)
            self._eval = [self.task.eval_set()]

    # -- data ---------------------------------------------------------------

    def batch(self, step: int):
        cfg = self.cfg
        if cfg.task == "char-lm":
            return lm_batch(self.train_data, cfg.context, cfg.batch_size, cfg.seed, step)
        return self.task.batch(cfg.batch_size, step)

    def evaluate(self) -> float:
        losses = [self.model.loss(b) for b in self._eval]
        self.model._cache = None
        return float(np.mean(losses))

    # -- stepping -----------------------------------------------------------

    def lr(self, step: int) -> float:
        c = self.cfg
        return lr_at(step, c.steps, c.lr, c.warmup, c.lr_floor)

    def _galore_step(self, batch, step, lr) -> StepRecord:
        cfg = self.cfg
        model = self.model
        if step == 0 or self.schedule.is_merge(step):
            loss, grads = merged_weight_grads(model, batch)
            for name, slot in model.slots.items():
                r = min(cfg.rank, *slot.shape)
                if name not in self.galore:
                    self.galore[name] = GaLoreState.create(
                        grads[name], r, orientation_for(*slot.shape), cfg.scale,
                        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                    )
                else:
                    refresh_projector(self.galore[name], grads[name], r, cfg.galore_reset_moments)
            return StepRecord(step, loss, True)
        loss = model.loss_and_grad(batch)
        if not math.isfinite(loss):
            raise DivergenceError(step)
        for name, slot in model.slots.items():
            slot.weight.value += galore_step(self.galore[name], slot.weight.grad, lr).astype(
                slot.weight.value.dtype, copy=False
            )
        self.optimizer.step(model.params, lr)
        return StepRecord(step, loss)

    def train_one(self) -> StepRecord:
        step = self.step
        batch = self.batch(step)
        lr = self.lr(step)
        method = self.cfg.method
        try:
            if method == "full":
                loss = self.model.loss_and_grad(batch)
                if not math.isfinite(loss):
                    raise DivergenceError(step)
                self.optimizer.step(self.model.trainable(), lr)
                rec = StepRecord(step, loss)
            elif method == "galore":
                rec = self._galore_step(batch, step, lr)
            else:
                rec = train_step(self.model, self.optimizer, self.schedule, batch, step, lr, self.policy)
        except (EngineError, FloatingPointError) as exc:
            raise DivergenceError(step, str(exc)) from exc
        if not math.isfinite(rec.loss):
            raise DivergenceError(step)
        self.step += 1
        return rec

    def run(self, until: Optional[int] = None, metrics_path=None, on_step=None) -> list[MetricsRecord]:
        """Train up to step ``until`` (default: the configured total)."""
        cfg = self.cfg
        until = cfg.steps if until is None else min(until, cfg.steps)
        records = []
        out = None
        if metrics_path is not None:
            out = _open_metrics(Path(metrics_path), self.step)
        try:
            with np.errstate(over="ignore", under="ignore"):
                while self.step < until:
                    t0 = time.perf_counter()
                    lr = self.lr(self.step)
                    rec = self.train_one()
                    done = rec.step + 1
                    eval_loss = None
                    if done % cfg.eval_every == 0 or done == cfg.steps:
                        eval_loss = self.evaluate()
                        if not math.isfinite(eval_loss):
                            raise DivergenceError(rec.step, "evaluation loss is not finite")
                    ms = (time.perf_counter() - t0) * 1000.0 if cfg.timing else 0.0
                    m = MetricsRecord(rec.step, rec.loss, eval_loss, lr, rec.merge,
                                      rec.mean_residual, ms)
                    records.append(m)
                    if out is not None:
                        out.write(format_rows([m]))
                        out.flush()
                    if on_step is not None:
                        on_step(self)
        finally:
            if out is not None:
                out.close()
        return records


def _open_metrics(path: Path, resume_step: int):
    """Open the CSV for appending, dropping any rows at or after ``resume_step``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join(CSV_HEADER) + "\n"
    kept = [header]
    if resume_step > 0 and path.exists():
        lines = path.read_text().splitlines(keepends=True)
        for line in lines[1:]:
            head = line.split(",", 1)[0]
            if head.isdigit() and int(head) < resume_step:
                kept.append(line)
    path.write_text("".join(kept))
    return path.open("a")


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def final_eval_loss(records) -> float:
    evals = [r.eval_loss for r in records if r.eval_loss is not None]
    if not evals:
        raise ValueError("no evaluation in run")
    return evals[-1]
