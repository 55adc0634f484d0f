"""Adam and the one-sided GaLore projected-Adam baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DimensionError, truncated_left_factor
from .nn import LEFT


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, dtype=np.float32, **hyper) -> "AdamState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), **hyper)

    @property
    def shape(self):
        return self.m.shape


def adam_step(state: AdamState, grad: np.ndarray, lr: float) -> np.ndarray:
    """Advance ``state`` by one gradient and return the (negative) update."""
    if grad.shape != state.m.shape:
        raise DimensionError(f"gradient {grad.shape} vs Adam state {state.m.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    denom = np.sqrt(state.v / bc2) + state.eps
    return (-lr) * (state.m / bc1) / denom


class Adam:
    """Adam over a name -> Param mapping; state is created lazily."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.hyper = dict(beta1=beta1, beta2=beta2, eps=eps)
        self.states: dict[str, AdamState] = {}

    def step(self, params: dict, lr: float) -> None:
        for name, p in params.items():
            state = self.states.get(name)
            if state is None:
                state = self.states[name] = AdamState.zeros(p.shape, p.value.dtype, **self.hyper)
            p.value += adam_step(state, p.grad, lr).astype(p.value.dtype, copy=False)

    def reset(self, name: str) -> None:
        self.states.pop(name, None)


@dataclass
class GaLoreState:
    """Projector plus Adam moments over the projected gradient.

    ``orientation`` LEFT keeps ``p`` as ``m x r`` and optimizes ``P^T G``;
    RIGHT keeps ``p`` as ``n x r`` and optimizes ``G Q``.
    """

    p: np.ndarray
    adam: AdamState
    orientation: str = LEFT
    scale: float = 1.0
    steps_since_refresh: int = 0

    @classmethod
    def create(cls, g_w: np.ndarray, rank: int, orientation: str = LEFT, scale=1.0, **hyper):
        p = _projector(g_w, rank, orientation)
        shape = (rank, g_w.shape[1]) if orientation == LEFT else (g_w.shape[0], rank)
        return cls(p, AdamState.zeros(shape, g_w.dtype, **hyper), orientation, scale)


def _projector(g_w, rank, orientation):
    if orientation == LEFT:
        return truncated_left_factor(g_w, rank)
    return truncated_left_factor(np.ascontiguousarray(g_w.T), rank)


def galore_step(state: GaLoreState, g_w: np.ndarray, lr: float) -> np.ndarray:
    """Full-rank weight update ``scale * P @ adam(P^T G)`` (or the right analog)."""
    p = state.p
    if state.orientation == LEFT:
        if g_w.shape[0] != p.shape[0]:
            raise DimensionError(f"gradient {g_w.shape} vs projector {p.shape}")
        low = adam_step(state.adam, p.T @ g_w, lr)
        update = p @ low
    else:
        if g_w.shape[1] != p.shape[0]:
            raise DimensionError(f"gradient {g_w.shape} vs projector {p.shape}")
        low = adam_step(state.adam, g_w @ p, lr)
        update = low @ p.T
    state.steps_since_refresh += 1
    return state.scale * update


def refresh_projector(state: GaLoreState, g_w: np.ndarray, rank: int, reset_moments=False) -> None:
    state.p = _projector(g_w, rank, state.orientation)
    state.steps_since_refresh = 0
    if reset_moments:
        a = state.adam
        state.adam = AdamState.zeros(a.shape, a.m.dtype, beta1=a.beta1, beta2=a.beta2, eps=a.eps)
