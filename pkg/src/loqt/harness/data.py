"""Deterministic batch streams.

Every batch is a pure function of ``(seed, step)``, so runs that share a seed
see the same data regardless of method, and a resumed run picks up the
stream exactly where the checkpoint left it.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

EVAL_STREAM = 1 << 30


class DataError(ValueError):
    pass


def default_corpus_path() -> Path:
    return Path(str(resources.files("loqt") / "data" / "corpus.txt"))


def load_corpus(path: str | Path | None = None) -> np.ndarray:
    path = Path(path) if path else default_corpus_path()
    if not path.is_file():
        raise DataError(f"corpus {path} not found")
    return np.frombuffer(path.read_bytes(), dtype=np.uint8)


def split_corpus(data: np.ndarray, eval_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(data) * (1.0 - eval_fraction))
    return data[:cut], data[cut:]


def lm_batch(data: np.ndarray, context: int, batch: int, seed: int, step: int):
    """``batch`` random windows of ``context + 1`` bytes -> (inputs, targets)."""
    if len(data) < context + 1:
        raise DataError(f"corpus of {len(data)} bytes is shorter than context + 1 = {context + 1}")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, len(data) - context, size=batch)
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    windows = data[idx].astype(np.int64)
    return windows[:, :-1], windows[:, 1:]


def byte_lm_batches(data: np.ndarray, context: int, batch: int, seed: int, start: int = 0):
    step = start
    while True:
        yield lm_batch(data, context, batch, seed, step)
        step += 1


class RegressionTask:
    """``y = x @ W* + noise`` with ``x ~ N(0, I)`` and a fixed hidden ``W*``.

    Under the half-sum-of-squares loss the irreducible error is
    ``noise**2 * dim / 2``.
    """

    def __init__(self, dim: int, seed: int, noise: float = 0.01):
        self.dim = dim
        self.seed = seed
        self.noise = noise
        rng = np.random.default_rng([seed, EVAL_STREAM + 1])
        self.w_star = (rng.standard_normal((dim, dim)) / np.sqrt(dim)).astype(np.float32)

    @property
    def loss_floor(self) -> float:
        return self.noise**2 * self.dim / 2.0

    def sample(self, rng, n):
        x = rng.standard_normal((n, self.dim)).astype(np.float32)
        y = x @ self.w_star + self.noise * rng.standard_normal((n, self.dim)).astype(np.float32)
        return x, y.astype(np.float32)

    def batch(self, batch: int, step: int):
        return self.sample(np.random.default_rng([self.seed, step]), batch)

    def eval_set(self, n: int = 4096):
        return self.sample(np.random.default_rng([self.seed, EVAL_STREAM]), n)


def synth_regression_batches(dim: int, batch: int, seed: int, noise: float = 0.01, start: int = 0):
    task = RegressionTask(dim, seed, noise)
    step = start
    while True:
        yield task.batch(batch, step)
        step += 1
