"""Fast oracle suite behind ``loqt verify``.

Each check compares the implementation against something derived
independently of it: the NF4 levels are rebuilt from normal quantiles with
:class:`statistics.NormalDist`, Penrose conditions are checked directly, the
adapter gradient is compared with the projected full gradient, and LoQT
without quantization is run side by side with the GaLore baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable

import numpy as np

from ..engine import AdapterPolicy, MergeSchedule, error_compensate, train_step
from ..linalg import frobenius_norm, pseudo_inverse, relative_error, truncated_left_factor
from ..nn import LEFT, MLP, LoQTLinear, merged_weight_grads, orientation_for
from ..optim import Adam, GaLoreState, galore_step, refresh_projector
from ..quant import BLOCK_SIZE, dequantize, quantize
from .data import RegressionTask

# QLoRA's asymmetric quantile construction
_NF4_OFFSET = 0.9677083


def reference_nf4_levels() -> np.ndarray:
    """NF4 levels from normal quantiles: 8 positive, 7 negative, and zero."""
    nd = NormalDist()

    def linspace(a, b, n):
        return [a + (b - a) * i / (n - 1) for i in range(n)]

    pos = [nd.inv_cdf(p) for p in linspace(_NF4_OFFSET, 0.5, 9)[:-1]]
    neg = [-nd.inv_cdf(p) for p in linspace(_NF4_OFFSET, 0.5, 8)[:-1]]
    levels = sorted(pos + [0.0] + neg)
    top = max(abs(v) for v in levels)
    return np.array([v / top for v in levels], dtype=np.float64)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


# -- individual oracles ----------------------------------------------------


def nf4_roundtrip(n_elems: int = 1 << 20, seed: int = 0) -> tuple[float, float, float]:
    """Returns (table mismatch, worst bound excess, worst absmax error).

    Dequantized values are checked against the reference table, so a corrupted
    codebook shows up even though it would satisfy its own half-gap bound.
    """
    ref = reference_nf4_levels()
    half_gap = float(np.max(np.diff(ref)) / 2.0)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n_elems // 256, 256)).astype(np.float32)
    q = quantize(w)
    deq = dequantize(q).astype(np.float64)
    codes = q.codes().reshape(-1)
    scales = np.repeat(q.block_scales().astype(np.float64), BLOCK_SIZE)[: w.size]
    flat = w.reshape(-1).astype(np.float64)
    table = float(np.max(np.abs(deq.reshape(-1) - ref[codes] * scales) / np.maximum(scales, 1e-30)))
    bound = float(np.max(np.abs(deq.reshape(-1) - flat) - half_gap * scales))
    blocks = np.abs(flat).reshape(-1, BLOCK_SIZE)
    arg = np.argmax(blocks, axis=1) + np.arange(blocks.shape[0]) * BLOCK_SIZE
    absmax = float(np.max(np.abs(deq.reshape(-1)[arg] - flat[arg])))
    return table, bound, absmax


def penrose_residuals(a: np.ndarray) -> list[float]:
    """Relative residuals of the four Moore-Penrose conditions."""
    a = a.astype(np.float64)
    x = pseudo_inverse(a.astype(np.float32)).astype(np.float64)
    ax, xa = a @ x, x @ a

    def rel(lhs, rhs):
        return frobenius_norm(lhs - rhs) / max(frobenius_norm(rhs), 1e-30)

    return [rel(ax @ a, a), rel(xa @ x, x), rel(ax.T, ax), rel(xa.T, xa)]


def random_penrose_case(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 65, size=2)
    a = rng.standard_normal((m, n))
    if seed % 3 == 0 and min(m, n) > 2:
        k = int(rng.integers(1, min(m, n)))
        a = rng.standard_normal((m, k)) @ rng.standard_normal((k, n))
    return a.astype(np.float32)


def gradient_equivalence_case(seed: int) -> float:
    """Relative gap between backprop ``G^B`` and ``s * P^T G^W`` for one random layer."""
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(2, 97, size=2))
    m = min(m, 64)
    r = int(rng.integers(1, min(m, n) + 1))
    rows = int(rng.integers(1, 33))
    s = float(rng.uniform(0.1, 2.0))
    orient = orientation_for(m, n)
    side = m if orient == LEFT else n
    p = np.linalg.qr(rng.standard_normal((side, r)))[0].astype(np.float32)
    b_shape = (r, n) if orient == LEFT else (m, r)
    w = rng.standard_normal((m, n)).astype(np.float32)
    b = rng.standard_normal(b_shape).astype(np.float32)
    layer = LoQTLinear(w, p, b, s, orient)
    layer.weight_grad_probe = True
    x = rng.standard_normal((rows, m)).astype(np.float32)
    dy = rng.standard_normal((rows, n)).astype(np.float32)
    layer.forward(x)
    layer.backward(dy)
    g_w = layer.weight_grad.astype(np.float64)
    p64 = p.astype(np.float64)
    expect = s * (p64.T @ g_w if orient == LEFT else g_w @ p64)
    return relative_error(layer.b.grad.astype(np.float64), expect)


def galore_equivalence(seed: int, steps: int = 300, rank: int = 8, tau: int = 20,
                       lr: float = 1e-2, dims=(32, 64, 32)) -> float:
    """Worst per-step relative gap between LoQT-nq and GaLore effective weights.

    Both start from the same MLP and see the same batches.  LoQT resets Adam
    at every merge, so GaLore resets its moments at every projector refresh.
    """
    task = RegressionTask(dims[0], seed)
    sched = MergeSchedule(tau=tau, psi=1.2, cap=2500)
    loqt_model = MLP(list(dims), seed=seed)
    galore_model = MLP(list(dims), seed=seed)
    policy = AdapterPolicy(rank=rank, scale=0.5, quantize_w=False, quantize_p=False, reset_adam=True)
    opt = Adam()
    states: dict[str, GaLoreState] = {}
    worst = 0.0
    for step in range(steps):
        batch = task.batch(64, step)
        train_step(loqt_model, opt, sched, batch, step, lr, policy)
        if step == 0 or sched.is_merge(step):
            _, grads = merged_weight_grads(galore_model, batch)
            for name, slot in galore_model.slots.items():
                r = min(rank, *slot.shape)
                if name in states:
                    refresh_projector(states[name], grads[name], r, reset_moments=True)
                else:
                    states[name] = GaLoreState.create(grads[name], r, orientation_for(*slot.shape), 0.5)
        else:
            galore_model.loss_and_grad(batch)
            for name, slot in galore_model.slots.items():
                slot.weight.value += galore_step(states[name], slot.weight.grad, lr)
        for name in loqt_model.slots:
            worst = max(worst, relative_error(loqt_model.slots[name].effective_weight(),
                                              galore_model.slots[name].effective_weight()))
    return worst


def compensation_case(seed: int, c_max: int = 5):
    """(report, final residual) for a random layer with a gradient-derived projector."""
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(8, 97, size=2))
    r = int(rng.integers(1, min(m, n) + 1))
    s = float(rng.uniform(0.25, 2.0))
    w = (rng.standard_normal((m, n)) * rng.uniform(0.01, 1.0)).astype(np.float32)
    g = rng.standard_normal((m, n)).astype(np.float32)
    orient = orientation_for(m, n)
    p = truncated_left_factor(g if orient == LEFT else np.ascontiguousarray(g.T), r)
    q, b, report = error_compensate(w, p, s, c_max, orient)
    low = p @ b if orient == LEFT else b @ p.T
    final = frobenius_norm(dequantize(q) + s * low - w)
    return report, final


# -- suite -----------------------------------------------------------------


def _check_nf4() -> CheckResult:
    ref = reference_nf4_levels()
    from ..quant import default_codebook

    table_gap = float(np.max(np.abs(default_codebook().values.astype(np.float64) - ref)))
    mismatch, excess, absmax = nf4_roundtrip()
    ok = table_gap < 5e-5 and mismatch < 1e-5 and excess <= 1e-6 and absmax <= 1e-6
    return CheckResult(
        "nf4-roundtrip", ok,
        f"codebook gap {table_gap:.2e}, table mismatch {mismatch:.2e}, "
        f"bound excess {max(excess, 0.0):.2e}, absmax error {absmax:.2e}",
    )


def _check_penrose() -> CheckResult:
    worst = max(max(penrose_residuals(random_penrose_case(seed))) for seed in range(50))
    return CheckResult("penrose", worst < 1e-4, f"worst relative residual {worst:.2e} over 50 cases")


def _check_gradient() -> CheckResult:
    worst = max(gradient_equivalence_case(seed) for seed in range(100))
    return CheckResult("gradient-equivalence", worst < 1e-5, f"worst gap {worst:.2e} over 100 layers")


def _check_galore() -> CheckResult:
    worst = max(galore_equivalence(seed) for seed in range(3))
    return CheckResult("galore-equivalence", worst < 1e-4,
                       f"worst per-step gap {worst:.2e} over 300 steps, 3 seeds")


def _check_compensation() -> CheckResult:
    bad = []
    for seed in range(50):
        report, final = compensation_case(seed)
        mono = all(b <= a for a, b in zip(report.residuals, report.residuals[1:]))
        if not (final <= report.naive_residual * (1 + 1e-6) and mono):
            bad.append(seed)
    detail = "50 layers dominate naive quantization" if not bad else f"failed seeds {bad}"
    return CheckResult("compensation-dominance", not bad, detail)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "nf4-roundtrip": _check_nf4,
    "penrose": _check_penrose,
    "gradient-equivalence": _check_gradient,
    "galore-equivalence": _check_galore,
    "compensation-dominance": _check_compensation,
}


def run_checks(names=None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        try:
            out.append(CHECKS[name]())
        except Exception as exc:  # a crashing oracle is a failed property
            out.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
    return out
