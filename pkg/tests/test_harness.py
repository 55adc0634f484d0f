import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loqt import quant
from loqt.harness import checkpoint
from loqt.harness.cli import main
from loqt.harness.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from loqt.harness.data import (
    DataError,
    RegressionTask,
    byte_lm_batches,
    lm_batch,
    load_corpus,
    split_corpus,
    synth_regression_batches,
)
from loqt.harness.training import CSV_HEADER, DivergenceError, Trainer, lr_at, read_metrics
from loqt.quant import FormatError

TINY_LM = dict(task="char-lm", d_model=16, n_layers=1, n_heads=2, d_ff=24, context=16,
               batch_size=4, steps=30, eval_every=10, eval_batches=2, tau=8, rank=4)
TINY_REG = dict(task="synth-regression", mlp_dims="8,16,8", batch_size=16, steps=30,
                eval_every=10, tau=8, rank=4)


# -- config ----------------------------------------------------------------


def test_parse_config_types_and_comments():
    cfg = parse_config("""
        # comment
        method = galore
        steps = 12   # trailing comment
        lr = 3e-3
        double_quant = yes
        output_dir = "runs/x"
    """)
    assert cfg.method == "galore" and cfg.steps == 12 and cfg.lr == 3e-3
    assert cfg.double_quant is True and cfg.output_dir == "runs/x"


@pytest.mark.parametrize("text", [
    "steps = many", "bogus = 1", "method = sgd", "no equals sign", "warmup = 1.5",
    "d_model = 30\nn_heads = 4", "double_quant = maybe", "psi = 0.5", "rank = 0",
    "task = synth-regression\nmlp_dims = 8,4",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_and_reload_roundtrip(tmp_path):
    cfg = RunConfig(method="loqt-nq", lr=0.0025, literal_schedule=True)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path, ["steps=7"]).steps == 7
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")


def test_digest_ignores_bookkeeping_only():
    cfg = RunConfig()
    assert cfg.digest() == cfg.replace(output_dir="elsewhere", timing=True).digest()
    assert cfg.digest() != cfg.replace(seed=2).digest()
    assert len(cfg.digest()) == 32


# -- data ------------------------------------------------------------------


def test_corpus_is_bundled():
    data = load_corpus()
    assert data.dtype == np.uint8 and len(data) > 100_000
    train, ev = split_corpus(data)
    assert len(train) + len(ev) == len(data) and len(ev) > 10_000


def test_batches_deterministic_and_in_bounds():
    data = np.arange(50, dtype=np.uint8)
    a = lm_batch(data, 10, 64, seed=3, step=5)
    b = lm_batch(data, 10, 64, seed=3, step=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    x, y = a
    assert np.array_equal(x[:, 1:], y[:, :-1])
    assert x.max() <= 48 and y.max() <= 49
    gen = byte_lm_batches(data, 10, 4, seed=3, start=5)
    assert np.array_equal(next(gen)[0], lm_batch(data, 10, 4, 3, 5)[0])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 256), st.integers(1, 64), st.integers(0, 10**6))
def test_windows_never_cross_corpus_end(n, context, step):
    data = np.arange(n, dtype=np.uint8)
    if n < context + 1:
        with pytest.raises(DataError):
            lm_batch(data, context, 4, 0, step)
        return
    x, y = lm_batch(data, context, 8, 0, step)
    # arange corpus: a window is contiguous iff it never wrapped
    assert np.all(np.diff(np.concatenate([x, y[:, -1:]], axis=1).astype(int), axis=1) == 1)


def test_regression_task():
    task = RegressionTask(32, seed=1)
    assert task.loss_floor == pytest.approx(0.01**2 * 32 / 2)
    x, y = task.batch(8, 0)
    x2, _ = task.batch(8, 0)
    assert np.array_equal(x, x2) and y.shape == (8, 32)
    gen = synth_regression_batches(32, 8, seed=1)
    assert np.array_equal(next(gen)[0], x)


def test_missing_corpus():
    with pytest.raises(DataError):
        load_corpus("/nonexistent/corpus.txt")


# -- schedule and training -------------------------------------------------


def test_lr_schedule_endpoints():
    total, peak = 3000, 0.01
    assert lr_at(0, total, peak) == pytest.approx(peak / 300)
    assert lr_at(299, total, peak) == pytest.approx(peak)
    assert abs(lr_at(total - 1, total, peak) - 0.1 * peak) < 1e-6
    lrs = [lr_at(s, total, peak) for s in range(300, total)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_all_methods_see_same_batches():
    streams = []
    for method in ("full", "galore", "loqt", "loqt-nq", "lora-frozen"):
        t = Trainer(RunConfig(method=method, **TINY_LM))
        streams.append(t.batch(7)[0])
    assert all(np.array_equal(streams[0], s) for s in streams)


@pytest.mark.parametrize("method", ["full", "galore", "loqt", "loqt-nq", "lora-frozen"])
@pytest.mark.parametrize("tiny", [TINY_LM, TINY_REG], ids=["lm", "reg"])
def test_runs_are_byte_identical(tmp_path, method, tiny):
    cfg = RunConfig(method=method, **tiny)
    Trainer(cfg).run(metrics_path=tmp_path / "a.csv")
    Trainer(cfg).run(metrics_path=tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = read_metrics(tmp_path / "a.csv")
    assert tuple(rows[0]) == CSV_HEADER and len(rows) == 30
    assert rows[-1]["eval_loss"] != ""
    if method not in ("full",):
        assert rows[0]["merge"] == "1"


def test_divergence_raises_with_step():
    cfg = RunConfig(method="full", **{**TINY_REG, "lr": 1e12, "activation": "identity", "warmup": 0.0})
    with pytest.raises(DivergenceError) as info:
        Trainer(cfg).run()
    assert info.value.step >= 0


# -- checkpoints -----------------------------------------------------------


@pytest.mark.parametrize("method", ["loqt", "galore", "full"])
def test_resume_matches_unbroken_run(tmp_path, method):
    cfg = RunConfig(method=method, double_quant=True, **TINY_LM)
    a = Trainer(cfg)
    a.run(metrics_path=tmp_path / "a.csv")
    b = Trainer(cfg)
    b.run(until=13, metrics_path=tmp_path / "b.csv")
    checkpoint.save(b, tmp_path / "mid.ckpt")
    c = Trainer(cfg)
    checkpoint.load(c, tmp_path / "mid.ckpt")
    assert checkpoint.state_equal(b, c)
    c.run(metrics_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert checkpoint.state_equal(a, c)


def test_truncated_checkpoint_leaves_state_untouched(tmp_path):
    cfg = RunConfig(**TINY_LM)
    t = Trainer(cfg)
    t.run(until=10)
    checkpoint.save(t, tmp_path / "x.ckpt")
    buf = (tmp_path / "x.ckpt").read_bytes()
    fresh = Trainer(cfg)
    snapshot = Trainer(cfg)
    for cut in (3, 40, len(buf) // 2, len(buf) - 1):
        (tmp_path / "bad.ckpt").write_bytes(buf[:cut])
        with pytest.raises(FormatError):
            checkpoint.load(fresh, tmp_path / "bad.ckpt")
        assert checkpoint.state_equal(fresh, snapshot) and fresh.step == 0


def test_bad_magic_and_version(tmp_path):
    t = Trainer(RunConfig(**TINY_REG))
    checkpoint.save(t, tmp_path / "x.ckpt")
    buf = bytearray((tmp_path / "x.ckpt").read_bytes())
    for pos, val in ((0, ord("X")), (4, 99)):
        bad = bytearray(buf)
        bad[pos] = val
        with pytest.raises(FormatError):
            checkpoint.decode(bytes(bad))


def test_digest_mismatch_warns_unless_forced(tmp_path):
    t = Trainer(RunConfig(**TINY_REG))
    checkpoint.save(t, tmp_path / "x.ckpt")
    other = Trainer(RunConfig(**{**TINY_REG, "lr": 0.5}))
    with pytest.warns(checkpoint.DigestMismatchWarning):
        checkpoint.load(other, tmp_path / "x.ckpt")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        checkpoint.load(other, tmp_path / "x.ckpt", force=True)


def test_shape_mismatch_is_format_error(tmp_path):
    t = Trainer(RunConfig(**TINY_REG))
    checkpoint.save(t, tmp_path / "x.ckpt")
    other = Trainer(RunConfig(**{**TINY_REG, "mlp_dims": "8,12,8"}))
    with pytest.raises(FormatError):
        checkpoint.load(other, tmp_path / "x.ckpt", force=True)


# -- CLI -------------------------------------------------------------------


def write_cfg(tmp_path, **over):
    values = {**TINY_REG, "output_dir": str(tmp_path / "run"), **over}
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def test_cli_train_writes_outputs(tmp_path, capsys):
    assert main(["train", "--config", str(write_cfg(tmp_path))]) == 0
    run = tmp_path / "run"
    assert (run / "metrics.csv").is_file() and (run / "final.ckpt").is_file()
    assert "final eval loss" in capsys.readouterr().out


def test_cli_train_resume(tmp_path):
    cfg = write_cfg(tmp_path, checkpoint_every=10)
    assert main(["train", "--config", str(cfg)]) == 0
    full = (tmp_path / "run" / "metrics.csv").read_bytes()
    assert (tmp_path / "run" / "last.ckpt").is_file()
    assert main(["train", "--config", str(cfg), "--resume"]) == 0
    assert (tmp_path / "run" / "metrics.csv").read_bytes() == full


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert main(["train", "--config", str(write_cfg(tmp_path, task="char-lm", corpus="/no/file"))]) == 2
    bad = write_cfg(tmp_path, lr=1e12, activation="identity", warmup=0.0)
    assert main(["train", "--config", str(bad)]) == 3
    assert "diverged at step" in capsys.readouterr().err
    assert main(["estimate-memory", "--arch", "99b", "--method", "loqt"]) == 2
    assert main(["train", "--config", str(write_cfg(tmp_path)), "--resume", str(tmp_path / "x")]) == 2


def test_cli_estimate_memory_jsonl(capsys):
    assert main(["estimate-memory", "--arch", "13b", "--rank", "1024", "--method", "all",
                 "--nf4", "--adam8bit", "--per-layer", "--jsonl"]) == 0
    recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    totals = {r["method"]: r["total_gb"] for r in recs}
    assert totals["loqt"] == min(totals.values())
    assert main(["estimate-memory", "--arch", "1b", "--method", "full"]) == 0
    assert "GB" in capsys.readouterr().out


def test_cli_verify_and_corruption(capsys):
    assert main(["verify", "--only", "nf4-roundtrip", "--only", "penrose"]) == 0
    first = capsys.readouterr().out
    assert main(["verify", "--only", "nf4-roundtrip", "--only", "penrose"]) == 0
    assert capsys.readouterr().out == first
    v = np.array(quant.NF4_LEVELS, dtype=np.float32)
    v[3] += 0.01
    quant.set_default_codebook(quant.Nf4Codebook(v))
    try:
        assert main(["verify", "--only", "nf4-roundtrip"]) == 1
    finally:
        quant.set_default_codebook(None)
    assert "FAIL nf4-roundtrip" in capsys.readouterr().out


def test_cli_ablate_small(tmp_path, capsys):
    cfg = write_cfg(tmp_path, steps=20)
    assert main(["ablate", "--which", "compensation", "--config", str(cfg)]) == 0
    summary = (tmp_path / "run" / "summary.csv").read_text().splitlines()
    assert summary[0] == "variant,final_eval_loss,ppl,steps"
    assert {l.split(",")[0] for l in summary[1:]} == {"naive", "ec", "ec_ei", "no_quant"}
    for v in ("naive", "ec", "ec_ei", "no_quant"):
        assert (tmp_path / "run" / v / "metrics.csv").is_file()


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("LOQT_THREADS", "zero")
    assert main(["train", "--config", str(write_cfg(tmp_path))]) == 2
