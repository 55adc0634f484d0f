"""Low-rank adapters over a quantized base: init, compensation, merging.

Each adapted layer keeps a frozen (optionally NF4) base ``W``, a frozen
projector ``P`` taken from the top singular vectors of the layer gradient,
and a trainable factor ``B``.  At scheduled steps the adapter is folded back
into the base, the base is re-quantized, and ``P``/``B`` are rebuilt from a
fresh one-batch gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import DTYPE, frobenius_norm, pseudo_inverse, truncated_left_factor
from .nn import LEFT, Linear, LoQTLinear, Model, low_rank_product, merged_weight_grads, orientation_for
from .optim import Adam
from .quant import QuantizedMatrix, dequantize, quantize


class EngineError(RuntimeError):
    """Internal inconsistency or numeric failure during training."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class MergeSchedule:
    """Merge intervals ``min(round(tau * psi**i), cap)``.

    With ``literal=True`` the intervals are ``min(round(tau + psi**i), cap)``
    instead, which stays close to ``tau`` for many merges.
    """

    tau: int = 100
    psi: float = 1.2
    cap: int = 2500
    literal: bool = False
    _steps: list = field(default_factory=list, init=False, repr=False, compare=False)
    _members: set = field(default_factory=set, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tau < 1 or self.cap < 1 or self.psi < 1.0:
            raise ValueError(f"invalid schedule tau={self.tau} psi={self.psi} cap={self.cap}")

    def interval(self, i: int) -> int:
        raw = self.tau + self.psi**i if self.literal else self.tau * self.psi**i
        if raw >= self.cap:
            return self.cap
        return max(1, min(_round_half_up(raw), self.cap))

    def _extend_to(self, k: int) -> None:
        while len(self._steps) <= k:
            prev = self._steps[-1] if self._steps else 0
            self._steps.append(prev + self.interval(len(self._steps)))
            self._members.add(self._steps[-1])

    def step_of(self, k: int) -> int:
        """Training step of the ``k``-th merge (0-based)."""
        self._extend_to(k)
        return self._steps[k]

    def merge_steps(self, upto: int) -> list[int]:
        out = []
        k = 0
        while self.step_of(k) < upto:
            out.append(self.step_of(k))
            k += 1
        return out

    def is_merge(self, step: int) -> bool:
        while not self._steps or self._steps[-1] < step:
            self._extend_to(len(self._steps))
        return step in self._members


def next_merge_step(schedule: MergeSchedule, k: int) -> int:
    if k < 0:
        raise ValueError("merge index must be non-negative")
    return schedule.step_of(k)


@dataclass
class CompensationReport:
    """Residual ``||deq(Q) + s*P*B - W||_F`` per compensation iteration.

    ``residuals`` is the running best (non-increasing); ``raw`` holds the
    value each iteration actually produced.
    """

    residuals: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    naive_residual: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.raw)

    @property
    def final(self) -> float:
        return self.residuals[-1] if self.residuals else self.naive_residual


def _solve_b(p_pinv, target, s, orientation):
    if orientation == LEFT:
        return (p_pinv @ target) / s
    return (target @ p_pinv.T) / s


def error_compensate(
    w: np.ndarray,
    p: np.ndarray,
    s: float,
    c_max: int = 5,
    orientation: str = LEFT,
    double_quant: bool = False,
    rel_tol: float = 1e-7,
):
    """Choose ``B`` so that ``deq(Q) + s * P @ B`` best matches ``W``.

    Alternates quantizing ``W - s*P@B`` and solving ``B`` by least squares
    through the pseudo-inverse of ``P``; the best iterate is returned.
    """
    w = np.asarray(w, dtype=DTYPE)
    p = np.asarray(p, dtype=DTYPE)
    p_pinv = pseudo_inverse(p)
    q0 = quantize(w, double_quant)
    report = CompensationReport(naive_residual=frobenius_norm(dequantize(q0) - w))
    best = None
    w_hat = w
    q = q0
    for c in range(c_max):
        if c:
            q = quantize(w_hat, double_quant)
        b = _solve_b(p_pinv, w - dequantize(q), s, orientation).astype(DTYPE)
        low = s * low_rank_product(p, b, orientation)
        resid = frobenius_norm(dequantize(q) + low - w)
        report.raw.append(resid)
        improved = best is None or resid < best[0] * (1.0 - rel_tol)
        if improved:
            best = (resid, q, b)
        report.residuals.append(best[0])
        if not improved:
            break
        w_hat = w - low
    return best[1], best[2], report


def init_layer(
    w: np.ndarray,
    g_w: np.ndarray,
    r: int,
    quantize_w: bool = False,
    quantize_p: bool = False,
    s: float = 0.5,
    *,
    double_quant: bool = False,
    compensate: bool = True,
    c_max: int = 5,
) -> LoQTLinear:
    """Build a :class:`LoQTLinear` from a full weight and its gradient."""
    w = np.asarray(w, dtype=DTYPE)
    g_w = np.asarray(g_w, dtype=DTYPE)
    if w.shape != g_w.shape:
        raise EngineError(f"weight {w.shape} and gradient {g_w.shape} differ")
    if not np.all(np.isfinite(g_w)):
        raise EngineError(f"non-finite gradient for a {w.shape[0]}x{w.shape[1]} layer")
    m, n = w.shape
    orientation = orientation_for(m, n)
    if orientation == LEFT:
        p = truncated_left_factor(g_w, r)
        b_shape = (r, n)
    else:
        p = truncated_left_factor(np.ascontiguousarray(g_w.T), r)
        b_shape = (m, r)
    p_store = quantize(p, double_quant) if quantize_p else p
    p_used = dequantize(p_store) if quantize_p else p
    if not quantize_w:
        report = CompensationReport(residuals=[0.0], raw=[0.0])
        layer = LoQTLinear(w.copy(), p_store, np.zeros(b_shape, DTYPE), s, orientation)
    elif compensate:
        q, b, report = error_compensate(w, p_used, s, c_max, orientation, double_quant)
        layer = LoQTLinear(q, p_store, b, s, orientation)
    else:
        q = quantize(w, double_quant)
        resid = frobenius_norm(dequantize(q) - w)
        report = CompensationReport([resid], [resid], resid)
        layer = LoQTLinear(q, p_store, np.zeros(b_shape, DTYPE), s, orientation)
    layer.report = report
    return layer


@dataclass
class AdapterPolicy:
    """How adapted layers are built and maintained during a run."""

    rank: int = 16
    scale: float = 0.5
    quantize_w: bool = False
    quantize_p: bool = False
    double_quant: bool = False
    compensate: bool = True
    comp_iters: int = 5
    reset_adam: bool = True
    merge: bool = True

    def build(self, w, g_w) -> LoQTLinear:
        r = min(self.rank, *w.shape)
        return init_layer(
            w, g_w, r, self.quantize_w, self.quantize_p, self.scale,
            double_quant=self.double_quant, compensate=self.compensate, c_max=self.comp_iters,
        )


def merge_and_reinit(layer: LoQTLinear, fresh_grad: np.ndarray, policy: AdapterPolicy) -> LoQTLinear:
    """Fold ``s * P @ B`` into the base, then rebuild the layer from ``fresh_grad``."""
    merged = layer.effective_weight().astype(DTYPE)
    new = policy.build(merged, fresh_grad)
    if new.shape != layer.shape:
        raise EngineError(f"layer shape drifted from {layer.shape} to {new.shape}")
    return new


@dataclass
class StepRecord:
    step: int
    loss: float
    merge: bool = False
    residuals: dict = field(default_factory=dict)

    @property
    def mean_residual(self) -> Optional[float]:
        if not self.residuals:
            return None
        return float(np.mean(list(self.residuals.values())))


def adapt_model(model: Model, batch, policy: AdapterPolicy, optimizer: Optional[Adam] = None) -> StepRecord:
    """Replace every slot by a fresh adapter using one batch's weight gradients.

    Slots are processed one after another; plain :class:`Linear` slots are
    converted, existing adapters are merged first.
    """
    loss, grads = merged_weight_grads(model, batch)
    residuals = {}
    for name in list(model.slots):
        slot = model.slots[name]
        if isinstance(slot, Linear):
            new = policy.build(slot.weight.value, grads[name])
            if optimizer is not None:
                optimizer.reset(name + ".W")
        else:
            new = merge_and_reinit(slot, grads[name], policy)
        model.slots[name] = new
        residuals[name] = new.report.final
        if optimizer is not None and (policy.reset_adam or isinstance(slot, Linear)):
            optimizer.reset(name + ".B")
        grads[name] = None
    return StepRecord(0, loss, True, residuals)


def train_step(model: Model, optimizer: Adam, schedule: MergeSchedule, batch, step: int,
               lr: float, policy: AdapterPolicy) -> StepRecord:
    """One step: adapter (re)initialization at step 0 and merge steps, else Adam on ``B``."""
    needs_init = any(isinstance(s, Linear) for s in model.slots.values())
    if needs_init or (policy.merge and schedule.is_merge(step)):
        rec = adapt_model(model, batch, policy, optimizer)
        rec.step = step
        if not math.isfinite(rec.loss):
            raise EngineError(f"non-finite loss at step {step} during merge")
        return rec
    loss = model.loss_and_grad(batch)
    if not math.isfinite(loss):
        raise EngineError(f"non-finite loss at step {step}")
    optimizer.step(model.trainable(), lr)
    return StepRecord(step, loss)
