import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from loqt.memory import (
    GB,
    LLAMA_TABLE,
    LayerSpec,
    MemoryModelError,
    Widths,
    arch_from_file,
    estimate_layer,
    estimate_model,
    layer_counts,
    named_arch,
    nf4_bytes,
    resolve_arch,
)

dims = st.integers(1, 4096)


@st.composite
def layer_specs(draw):
    m, n = draw(dims), draw(dims)
    r = draw(st.integers(1, min(m, n)))
    return LayerSpec(m, n, r)


@settings(max_examples=200)
@given(layer_specs())
def test_table_formulas_exact(spec):
    lo, hi = sorted((spec.m, spec.n))
    r = spec.r
    assert layer_counts(spec, "full_adam") == (lo * hi, 2 * lo * hi, lo * hi, 0)
    assert layer_counts(spec, "galore")[:3] == (lo * hi, lo * r + 2 * hi * r, lo * hi)
    assert layer_counts(spec, "lora")[:3] == (lo * hi + lo * r + hi * r, 2 * lo * r + 2 * hi * r,
                                              lo * r + hi * r)
    assert layer_counts(spec, "loqt")[:3] == (lo * hi + lo * r + hi * r, 2 * hi * r, hi * r)


@settings(max_examples=100)
@given(layer_specs())
def test_loqt_optimizer_and_gradients_never_exceed_others(spec):
    loqt = layer_counts(spec, "loqt")
    for other in ("galore", "lora", "full_adam"):
        o = layer_counts(spec, other)
        assert loqt[1] <= o[1] and loqt[2] <= o[2]


@settings(max_examples=100)
@given(layer_specs())
def test_bytes_follow_widths(spec):
    est = estimate_layer(spec, "galore", Widths(32, 16, 8))
    w, o, g, _ = layer_counts(spec, "galore")
    assert est.weight_bytes == 4 * w and est.optimizer_bytes == 2 * o and est.gradient_bytes == g


def test_zero_rank_loqt_is_not_smaller_than_full():
    spec = LayerSpec(64, 96, 0)
    full = estimate_layer(spec, "full_adam")
    loqt = estimate_layer(spec, "loqt")
    assert loqt.weights_elems >= full.weights_elems


def test_nf4_bytes():
    assert nf4_bytes(0) == 0
    assert nf4_bytes(64, double_quant=False) == 32 + 4
    # 256 blocks share one (offset, step) pair when double quantized
    assert nf4_bytes(64 * 256) == 64 * 128 + 256 + 8


def test_invalid_specs():
    with pytest.raises(MemoryModelError):
        LayerSpec(4, 4, 5)
    with pytest.raises(MemoryModelError):
        LayerSpec(0, 4)
    with pytest.raises(MemoryModelError):
        layer_counts(LayerSpec(4, 4, 2), "sgd")
    with pytest.raises(MemoryModelError):
        named_arch("3b")


def table1_gb(arch, method, nf4=False):
    return estimate_model(arch, method, nf4=nf4).weights_and_optimizer_bytes / GB


def test_1b_totals_within_15_percent_of_table():
    arch = named_arch("1b")
    assert table1_gb(arch, "loqt", nf4=True) == pytest.approx(3.16, rel=0.15)
    assert table1_gb(arch, "full_adam") == pytest.approx(7.80, rel=0.15)
    assert table1_gb(arch, "galore") == pytest.approx(4.38, rel=0.15)


def test_param_counts_match_model_names():
    expected = {"60m": 58e6, "130m": 134e6, "350m": 368e6, "1b": 1.34e9, "7b": 6.7e9}
    for name, n in expected.items():
        assert named_arch(name).n_params == pytest.approx(n, rel=0.05)


def test_13b_ordering():
    arch = named_arch("13b", rank=1024)
    variants = [dict(), dict(adam8bit=True), dict(adam8bit=True, per_layer_grads=True)]
    total = {
        m: [estimate_model(arch, m, nf4=(m == "loqt"), **v).bytes_total for v in variants]
        for m in ("full_adam", "galore", "loqt")
    }
    # every LoQT variant beats every GaLore variant; GaLore beats Adam per use case
    assert max(total["loqt"]) < min(total["galore"])
    for i in range(3):
        assert total["loqt"][i] < total["galore"][i] < total["full_adam"][i]
    for m in total:
        assert total[m][0] > total[m][1] > total[m][2]


def test_7b_fits_consumer_gpu():
    est = estimate_model(named_arch("7b"), "loqt", nf4=True, adam8bit=True, per_layer_grads=True)
    assert est.bytes_total / GB < 24


def test_per_layer_gradients_keep_only_largest_layer():
    arch = named_arch("60m")
    full = estimate_model(arch, "full_adam")
    per = estimate_model(arch, "full_adam", per_layer_grads=True)
    assert per.gradient_bytes == full.max_layer_gradient_bytes < full.gradient_bytes


def test_arch_files(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps({"hidden": 64, "intermediate": 172, "layers": 2, "rank": 8, "vocab": 256}))
    arch = arch_from_file(p)
    assert len(arch.layers) == 2 + 2 * 9 + 1
    explicit = tmp_path / "explicit.json"
    explicit.write_text(json.dumps({"layers": [{"m": 4, "n": 6, "r": 2}, {"m": 3, "n": 3, "adapted": False}]}))
    arch = resolve_arch(str(explicit))
    assert arch.n_params == 33
    with pytest.raises(MemoryModelError):
        resolve_arch(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"hidden": 4}))
    with pytest.raises(MemoryModelError):
        arch_from_file(bad)


def test_table_is_complete():
    assert set(LLAMA_TABLE) == {"60m", "130m", "350m", "1b", "7b", "13b"}
    for name in LLAMA_TABLE:
        est = estimate_model(named_arch(name), "loqt", nf4=True)
        assert math.isfinite(est.bytes_total) and est.bytes_total > 0
