"""Hand-written forward/backward passes for the toy models.

Every differentiable piece caches what its backward pass needs during the
forward call.  Weight matrices follow the ``y = x @ W`` convention, so a layer
mapping ``m`` features to ``n`` features holds an ``m x n`` weight.

Two models are provided: an MLP for synthetic regression and a small
decoder-only byte-level language model.  Their projection matrices live in
``model.slots`` and can be either a plain :class:`Linear` or a
:class:`LoQTLinear`; embeddings, norms and the output head are always
ordinary full-rank parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .linalg import DTYPE, DimensionError
from .quant import QuantizedMatrix, dequantize

LEFT = "left"
RIGHT = "right"


class UsageError(RuntimeError):
    """Backward called without a matching forward."""


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)


def _dense(w, dtype) -> np.ndarray:
    if isinstance(w, QuantizedMatrix):
        return dequantize(w).astype(dtype, copy=False)
    return w.astype(dtype, copy=False)


def orientation_for(m: int, n: int) -> str:
    """Project the smaller side: left factor when ``m <= n``."""
    return LEFT if m <= n else RIGHT


def low_rank_product(p: np.ndarray, b: np.ndarray, orientation: str) -> np.ndarray:
    """``P @ B`` (left) or ``B @ Q^T`` (right)."""
    return p @ b if orientation == LEFT else b @ p.T


class Linear:
    """Plain ``y = x @ W`` with a trainable full-rank weight."""

    def __init__(self, weight: np.ndarray):
        self.weight = Param(weight)
        self._x = None
        self.weight_grad_probe = False

    @property
    def shape(self):
        return self.weight.shape

    def effective_weight(self) -> np.ndarray:
        return self.weight.value

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"input {x.shape} does not match weight {self.weight.shape}")
        self._x = x
        return x @ self.weight.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise UsageError("Linear.backward called before forward")
        x, self._x = self._x, None
        self.weight.grad += x.T @ dy
        return dy @ self.weight.value.T


class LoQTLinear:
    """``y = x @ W + s * x @ (P @ B)`` with frozen ``W``, ``P`` and trainable ``B``.

    ``w`` and ``p`` may be dense arrays or :class:`QuantizedMatrix`; they are
    dequantized on every forward call.  In the right orientation the frozen
    factor is ``Q`` (``n x r``) and the adapter is ``B @ Q^T`` with ``B`` of
    shape ``m x r``.
    """

    def __init__(self, w, p, b: np.ndarray, s: float, orientation: str, dtype=DTYPE):
        m, n = w.shape
        r = p.shape[1]
        want = (r, n) if orientation == LEFT else (m, r)
        side = m if orientation == LEFT else n
        if p.shape[0] != side or b.shape != want:
            raise DimensionError(
                f"{orientation} adapter for {m}x{n}: P {p.shape}, B {b.shape}"
            )
        self.w = w
        self.p = p
        self.b = Param(np.asarray(b, dtype=dtype))
        self.s = float(s)
        self.orientation = orientation
        self.rank = r
        self.dtype = dtype
        self.report = None
        self.weight_grad_probe = False
        self.weight_grad: Optional[np.ndarray] = None
        self._cache = None

    @property
    def shape(self):
        return self.w.shape

    def dense_w(self) -> np.ndarray:
        return _dense(self.w, self.dtype)

    def dense_p(self) -> np.ndarray:
        return _dense(self.p, self.dtype)

    def effective_weight(self) -> np.ndarray:
        return self.dense_w() + self.s * low_rank_product(
            self.dense_p(), self.b.value, self.orientation
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        w = self.dense_w()
        p = self.dense_p()
        if x.shape[-1] != w.shape[0]:
            raise DimensionError(f"input {x.shape} does not match weight {w.shape}")
        # the folded m x n weight is cheaper than two extra token-sized matmuls
        w_eff = w + self.s * low_rank_product(p, self.b.value, self.orientation)
        self._cache = (x, w_eff, p)
        return x @ w_eff

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise UsageError("LoQTLinear.backward called before forward")
        x, w_eff, p = self._cache
        self._cache = None
        # backprop through the adapter path itself, not through P^T G^W
        if self.orientation == LEFT:
            self.b.grad += self.s * ((x @ p).T @ dy)
        else:
            self.b.grad += self.s * (x.T @ (dy @ p))
        if self.weight_grad_probe:
            self.weight_grad = x.T @ dy
        return dy @ w_eff.T


Slot = Union[Linear, LoQTLinear]


# --- stateless pieces -------------------------------------------------------


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbeta = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def cross_entropy_forward(logits, targets):
    """Mean negative log-likelihood in nats; ``logits`` is ``(N, V)``."""
    shift = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), targets].mean()
    return float(loss), (logp, targets)


def cross_entropy_backward(cache):
    logp, targets = cache
    n = logp.shape[0]
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return grad / n


def mse_forward(pred, target):
    """``0.5 * sum over outputs, mean over rows`` of the squared error."""
    diff = pred - target
    return float(0.5 * np.sum(diff * diff) / pred.shape[0]), diff


def mse_backward(diff):
    return diff / diff.shape[0]


def attention_forward(q, k, v):
    """Causal softmax attention on ``(B, H, T, hd)`` tensors."""
    t = q.shape[2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    out = att @ v
    return out, (q, k, v, att, scale)


def attention_backward(dout, cache):
    q, k, v, att, scale = cache
    dv = att.transpose(0, 1, 3, 2) @ dout
    datt = dout @ v.transpose(0, 1, 3, 2)
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    return dq, dk, dv


# --- models -----------------------------------------------------------------


class Model:
    """Common bookkeeping: adaptable ``slots`` plus full-rank ``params``."""

    dtype = DTYPE

    def __init__(self):
        self.slots: dict[str, Slot] = {}
        self.params: dict[str, Param] = {}

    def trainable(self) -> dict[str, Param]:
        out = dict(self.params)
        for name, slot in self.slots.items():
            if isinstance(slot, LoQTLinear):
                out[name + ".B"] = slot.b
            else:
                out[name + ".W"] = slot.weight
        return out

    def zero_grad(self):
        for p in self.trainable().values():
            p.zero_grad()

    def loss(self, batch) -> float:
        raise NotImplementedError

    def backward(self) -> None:
        raise NotImplementedError

    def loss_and_grad(self, batch) -> float:
        self.zero_grad()
        loss = self.loss(batch)
        self.backward()
        return loss


class MLP(Model):
    """Stack of adaptable linear layers with an elementwise activation."""

    ACTIVATIONS = ("tanh", "relu", "identity")

    def __init__(self, dims, activation="tanh", seed=0, dtype=DTYPE):
        super().__init__()
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dtype = dtype
        self.activation = activation
        rng = np.random.default_rng(seed)
        for i, (m, n) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.standard_normal((m, n)) / math.sqrt(m)
            self.slots[f"fc{i}"] = Linear(w.astype(dtype))
        self._acts = []
        self._diff = None

    def _act(self, h):
        if self.activation == "tanh":
            out = np.tanh(h)
            return out, out
        if self.activation == "relu":
            return np.maximum(h, 0), h > 0
        if self.activation == "identity":
            return h, None
        raise ValueError(f"unknown activation {self.activation!r}")

    def _act_back(self, dy, cache):
        if self.activation == "tanh":
            return dy * (1.0 - cache * cache)
        if self.activation == "relu":
            return dy * cache
        return dy

    def predict(self, x):
        h = np.asarray(x, dtype=self.dtype)
        self._acts = []
        names = list(self.slots)
        for i, name in enumerate(names):
            h = self.slots[name].forward(h)
            if i < len(names) - 1:
                h, cache = self._act(h)
                self._acts.append(cache)
        return h

    def loss(self, batch):
        x, y = batch
        pred = self.predict(x)
        loss, self._diff = mse_forward(pred, np.asarray(y, dtype=self.dtype))
        return loss

    def backward(self):
        if self._diff is None:
            raise UsageError("MLP.backward called before loss")
        dy = mse_backward(self._diff)
        self._diff = None
        names = list(self.slots)
        for i in reversed(range(len(names))):
            if i < len(names) - 1:
                dy = self._act_back(dy, self._acts[i])
            dy = self.slots[names[i]].backward(dy)


@dataclass
class DecoderConfig:
    vocab: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 172
    context: int = 128


class DecoderLM(Model):
    """Pre-norm decoder: learned positions, causal attention, GELU MLP."""

    def __init__(self, cfg: DecoderConfig, seed=0, dtype=DTYPE):
        super().__init__()
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d, f = cfg.d_model, cfg.d_ff

        def normal(shape, std):
            return (rng.standard_normal(shape) * std).astype(dtype)

        self.params["tok_emb"] = Param(normal((cfg.vocab, d), 0.02))
        self.params["pos_emb"] = Param(normal((cfg.context, d), 0.02))
        resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            for ln in ("ln1", "ln2"):
                self.params[f"{pre}.{ln}.g"] = Param(np.ones(d, dtype=dtype))
                self.params[f"{pre}.{ln}.b"] = Param(np.zeros(d, dtype=dtype))
            for proj in ("q", "k", "v"):
                self.slots[f"{pre}.attn.{proj}"] = Linear(normal((d, d), 0.02))
            self.slots[f"{pre}.attn.o"] = Linear(normal((d, d), resid_std))
            self.slots[f"{pre}.mlp.up"] = Linear(normal((d, f), 0.02))
            self.slots[f"{pre}.mlp.down"] = Linear(normal((f, d), resid_std))
        self.params["ln_f.g"] = Param(np.ones(d, dtype=dtype))
        self.params["ln_f.b"] = Param(np.zeros(d, dtype=dtype))
        self.params["head"] = Param(normal((d, cfg.vocab), 0.02))
        self._cache = None

    def logits(self, tokens):
        cfg = self.cfg
        tokens = np.asarray(tokens)
        bsz, t = tokens.shape
        if t > cfg.context:
            raise DimensionError(f"sequence length {t} exceeds context {cfg.context}")
        h, d = cfg.n_heads, cfg.d_model
        hd = d // h
        P = self.params
        x = P["tok_emb"].value[tokens] + P["pos_emb"].value[:t][None]
        x = x.reshape(bsz * t, d)
        caches = []
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            a_in, ln1 = layer_norm_forward(x, P[f"{pre}.ln1.g"].value, P[f"{pre}.ln1.b"].value)
            heads = []
            for proj in ("q", "k", "v"):
                out = self.slots[f"{pre}.attn.{proj}"].forward(a_in)
                heads.append(out.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3))
            att, att_cache = attention_forward(*heads)
            att = att.transpose(0, 2, 1, 3).reshape(bsz * t, d)
            x = x + self.slots[f"{pre}.attn.o"].forward(att)
            m_in, ln2 = layer_norm_forward(x, P[f"{pre}.ln2.g"].value, P[f"{pre}.ln2.b"].value)
            up = self.slots[f"{pre}.mlp.up"].forward(m_in)
            act, gelu = gelu_forward(up)
            x = x + self.slots[f"{pre}.mlp.down"].forward(act)
            caches.append((ln1, att_cache, ln2, gelu))
        xf, lnf = layer_norm_forward(x, P["ln_f.g"].value, P["ln_f.b"].value)
        logits = xf @ P["head"].value
        self._cache = (tokens, bsz, t, caches, xf, lnf)
        return logits

    def loss(self, batch):
        tokens, targets = batch
        logits = self.logits(tokens)
        loss, ce = cross_entropy_forward(logits, np.asarray(targets).reshape(-1))
        self._cache = self._cache + (ce,)
        return loss

    def backward(self):
        if self._cache is None or len(self._cache) != 7:
            raise UsageError("DecoderLM.backward called before loss")
        tokens, bsz, t, caches, xf, lnf, ce = self._cache
        self._cache = None
        cfg = self.cfg
        h, d = cfg.n_heads, cfg.d_model
        hd = d // h
        P = self.params
        dlogits = cross_entropy_backward(ce).astype(self.dtype, copy=False)
        P["head"].grad += xf.T @ dlogits
        dxf = dlogits @ P["head"].value.T
        dx, dg, db = layer_norm_backward(dxf, lnf)
        P["ln_f.g"].grad += dg
        P["ln_f.b"].grad += db
        for i in reversed(range(cfg.n_layers)):
            pre = f"blocks.{i}"
            ln1, att_cache, ln2, gelu = caches[i]
            dact = self.slots[f"{pre}.mlp.down"].backward(dx)
            dup = gelu_backward(dact, gelu)
            dm_in = self.slots[f"{pre}.mlp.up"].backward(dup)
            dres, dg, db = layer_norm_backward(dm_in, ln2)
            P[f"{pre}.ln2.g"].grad += dg
            P[f"{pre}.ln2.b"].grad += db
            dx = dx + dres
            datt = self.slots[f"{pre}.attn.o"].backward(dx)
            datt = datt.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
            dq, dk, dv = attention_backward(datt, att_cache)
            da_in = 0
            for proj, g in zip(("q", "k", "v"), (dq, dk, dv)):
                g = g.transpose(0, 2, 1, 3).reshape(bsz * t, d)
                da_in = da_in + self.slots[f"{pre}.attn.{proj}"].backward(g)
            dres, dg, db = layer_norm_backward(da_in, ln1)
            P[f"{pre}.ln1.g"].grad += dg
            P[f"{pre}.ln1.b"].grad += db
            dx = dx + dres
        dx = dx.reshape(bsz, t, d)
        np.add.at(P["tok_emb"].grad, tokens, dx)
        P["pos_emb"].grad[:t] += dx.sum(axis=0)


def merged_weight_grads(model: Model, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Gradient of the loss w.r.t. every slot's effective weight on one batch.

    No optimizer state is touched; parameter gradients are zeroed afterwards.
    """
    probes = {}
    for name, slot in model.slots.items():
        slot.weight_grad_probe = True
        probes[name] = slot
    try:
        model.zero_grad()
        loss = model.loss(batch)
        model.backward()
        grads = {}
        for name, slot in probes.items():
            if isinstance(slot, LoQTLinear):
                grads[name] = slot.weight_grad
                slot.weight_grad = None
            else:
                grads[name] = slot.weight.grad.copy()
    finally:
        for slot in probes.values():
            slot.weight_grad_probe = False
        model.zero_grad()
    return loss, grads


def grad_of_merged_weight(model: Model, batch, layer_id: str) -> np.ndarray:
    return merged_weight_grads(model, batch)[1][layer_id]
