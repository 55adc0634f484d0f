import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loqt.engine import (
    AdapterPolicy,
    EngineError,
    MergeSchedule,
    adapt_model,
    error_compensate,
    init_layer,
    merge_and_reinit,
    next_merge_step,
    train_step,
)
from loqt.harness.verify import compensation_case
from loqt.linalg import frobenius_norm, relative_error, truncated_left_factor
from loqt.nn import LEFT, MLP, Linear, LoQTLinear, orientation_for
from loqt.optim import Adam
from loqt.quant import QuantizedMatrix, dequantize, quantize


def test_exponential_schedule_steps():
    s = MergeSchedule(tau=100, psi=1.2, cap=2500)
    assert [s.interval(i) for i in range(4)] == [100, 120, 144, 173]
    assert [next_merge_step(s, k) for k in range(4)] == [100, 220, 364, 537]
    assert s.merge_steps(600) == [100, 220, 364, 537]
    assert s.is_merge(364) and not s.is_merge(365)


def test_schedule_cap_and_fixed():
    capped = MergeSchedule(tau=100, psi=2.0, cap=300)
    assert [capped.interval(i) for i in range(5)] == [100, 200, 300, 300, 300]
    fixed = MergeSchedule(tau=200, psi=1.0)
    assert fixed.merge_steps(1000) == [200, 400, 600, 800]


def test_literal_schedule_is_additive():
    s = MergeSchedule(tau=100, psi=1.2, literal=True)
    assert [s.interval(i) for i in range(3)] == [101, 101, 101]
    assert s.interval(20) == round(100 + 1.2**20)


def test_schedule_validation_and_equality():
    with pytest.raises(ValueError):
        MergeSchedule(psi=0.5)
    with pytest.raises(ValueError):
        next_merge_step(MergeSchedule(), -1)
    a, b = MergeSchedule(), MergeSchedule()
    a.merge_steps(5000)
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(1.0, 3.0), st.integers(1, 3000))
def test_schedule_intervals_monotone_and_capped(tau, psi, cap):
    s = MergeSchedule(tau, psi, cap)
    steps = [s.step_of(k) for k in range(12)]
    gaps = np.diff([0] + steps)
    assert np.all(gaps >= 1) and np.all(gaps <= cap)
    assert np.all(np.diff(gaps) >= 0)


@pytest.mark.parametrize("seed", range(50))
def test_compensation_dominates_naive(seed):
    report, final = compensation_case(seed)
    assert final <= report.naive_residual * (1 + 1e-6)
    assert all(b <= a for a, b in zip(report.residuals, report.residuals[1:]))
    assert final == pytest.approx(report.final, rel=1e-4)
    assert 1 <= report.iterations <= 5


def test_compensation_with_full_rank_projector_is_near_exact():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((16, 24)).astype(np.float32)
    p = truncated_left_factor(rng.standard_normal((16, 24)).astype(np.float32), 16)
    q, b, report = error_compensate(w, p, 0.5)
    assert report.final < 1e-4 * report.naive_residual


def test_init_layer_variants():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((12, 20)).astype(np.float32)
    g = rng.standard_normal((12, 20)).astype(np.float32)
    plain = init_layer(w, g, 4)
    assert not plain.b.value.any()
    np.testing.assert_array_equal(plain.effective_weight(), w)

    naive = init_layer(w, g, 4, quantize_w=True, compensate=False)
    comp = init_layer(w, g, 4, quantize_w=True, quantize_p=True)
    assert isinstance(comp.w, QuantizedMatrix) and isinstance(comp.p, QuantizedMatrix)
    err_naive = frobenius_norm(naive.effective_weight() - w)
    err_comp = frobenius_norm(comp.effective_weight() - w)
    assert err_comp < err_naive
    assert comp.report.final == pytest.approx(err_comp, rel=1e-4)

    right = init_layer(w.T.copy(), g.T.copy(), 4)
    assert right.orientation != LEFT and right.b.value.shape == (20, 4)


def test_init_layer_rejects_bad_gradient():
    w = np.zeros((4, 6), np.float32)
    with pytest.raises(EngineError):
        init_layer(w, np.zeros((6, 4), np.float32), 2)
    g = np.ones((4, 6), np.float32)
    g[0, 0] = np.nan
    with pytest.raises(EngineError):
        init_layer(w, g, 2)


def test_merge_preserves_effective_weight_without_quantization():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((10, 14)).astype(np.float32)
    layer = init_layer(w, rng.standard_normal((10, 14)).astype(np.float32), 3)
    layer.b.value[:] = rng.standard_normal(layer.b.value.shape)
    before = layer.effective_weight()
    new = merge_and_reinit(layer, rng.standard_normal((10, 14)).astype(np.float32), AdapterPolicy(rank=3))
    assert relative_error(new.effective_weight(), before) < 1e-6
    assert not new.b.value.any()


def test_policy_caps_rank():
    rng = np.random.default_rng(3)
    layer = AdapterPolicy(rank=64).build(np.ones((8, 12), np.float32),
                                         rng.standard_normal((8, 12)).astype(np.float32))
    assert layer.rank == 8


def regression_batch(step, dim=8):
    rng = np.random.default_rng([0, step])
    x = rng.standard_normal((16, dim)).astype(np.float32)
    return x, (0.5 * x).astype(np.float32)


def test_adapt_model_converts_and_resets_state():
    model = MLP([8, 12, 8], seed=0)
    opt = Adam()
    model.loss_and_grad(regression_batch(0))
    opt.step(model.trainable(), 0.01)
    assert "fc0.W" in opt.states
    rec = adapt_model(model, regression_batch(1), AdapterPolicy(rank=4), opt)
    assert rec.merge and set(rec.residuals) == {"fc0", "fc1"}
    assert all(isinstance(s, LoQTLinear) for s in model.slots.values())
    assert "fc0.W" not in opt.states


def test_train_step_merges_on_schedule():
    model = MLP([8, 12, 8], seed=0)
    opt = Adam()
    sched = MergeSchedule(tau=5, psi=1.0)
    policy = AdapterPolicy(rank=4, quantize_w=True)
    merges = []
    losses = []
    for step in range(16):
        rec = train_step(model, opt, sched, regression_batch(step), step, 0.01, policy)
        merges.append(rec.merge)
        losses.append(rec.loss)
    assert [i for i, m in enumerate(merges) if m] == [0, 5, 10, 15]
    assert losses[-1] < losses[0]
    assert isinstance(model.slots["fc0"].w, QuantizedMatrix)


def test_frozen_policy_never_merges():
    model = MLP([8, 12, 8], seed=0)
    opt = Adam()
    sched = MergeSchedule(tau=3, psi=1.0)
    policy = AdapterPolicy(rank=4, merge=False)
    recs = [train_step(model, opt, sched, regression_batch(s), s, 0.01, policy) for s in range(8)]
    assert [r.merge for r in recs] == [True] + [False] * 7
