"""Analytic memory estimates for full Adam, GaLore, LoRA and LoQT.

Per-layer element counts for an ``m x n`` weight (``m <= n``) and rank ``r``:

    method     weights        optimizer     gradients
    full_adam  mn             2mn           mn
    galore     mn             mr + 2nr      mn
    lora       mn + mr + nr   2mr + 2nr     mr + nr
    loqt       mn + mr + nr   2nr           nr

Whole-model estimates add full-rank embeddings, norms and the output head,
and price each tensor at its storage width.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

METHODS = ("full_adam", "galore", "lora", "loqt")
# methods whose frozen base can be stored in NF4
QUANTIZABLE = ("lora", "loqt")

NF4_BLOCK = 64
SCALE_CHUNK = 256
ADAM8_BLOCK = 2048
# binary gigabytes, as GPU memory is usually reported
GB = 1 << 30


class MemoryModelError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    m: int
    n: int
    r: int = 0
    adapted: bool = True
    name: str = ""

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.r < 0:
            raise MemoryModelError(f"invalid layer spec {self}")
        if self.adapted and self.r > min(self.m, self.n):
            raise MemoryModelError(f"rank {self.r} exceeds min({self.m}, {self.n})")


@dataclass(frozen=True)
class Widths:
    weight_bits: int = 16
    optim_bits: int = 16
    grad_bits: int = 16


@dataclass
class MemoryEstimate:
    weights_elems: int = 0
    optimizer_elems: int = 0
    gradient_elems: int = 0
    weight_bytes: int = 0
    optimizer_bytes: int = 0
    gradient_bytes: int = 0
    max_layer_gradient_bytes: int = 0

    @property
    def bytes_total(self) -> int:
        return self.weight_bytes + self.optimizer_bytes + self.gradient_bytes

    @property
    def weights_and_optimizer_bytes(self) -> int:
        return self.weight_bytes + self.optimizer_bytes

    def __add__(self, other: "MemoryEstimate") -> "MemoryEstimate":
        return MemoryEstimate(
            self.weights_elems + other.weights_elems,
            self.optimizer_elems + other.optimizer_elems,
            self.gradient_elems + other.gradient_elems,
            self.weight_bytes + other.weight_bytes,
            self.optimizer_bytes + other.optimizer_bytes,
            self.gradient_bytes + other.gradient_bytes,
            max(self.max_layer_gradient_bytes, other.max_layer_gradient_bytes),
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["bytes_total"] = self.bytes_total
        return d

    def gb(self) -> dict[str, float]:
        return {
            "weights": self.weight_bytes / GB,
            "optimizer": self.optimizer_bytes / GB,
            "gradients": self.gradient_bytes / GB,
            "total": self.bytes_total / GB,
        }


def _bits_to_bytes(bits: int) -> int:
    return (bits + 7) // 8


def nf4_bytes(elems: int, double_quant: bool = True) -> int:
    """Storage of one NF4 tensor: packed codes plus its block scales."""
    if elems == 0:
        return 0
    blocks = math.ceil(elems / NF4_BLOCK)
    codes = (elems + 1) // 2
    if double_quant:
        chunks = math.ceil(blocks / SCALE_CHUNK)
        return codes + blocks + 8 * chunks
    return codes + 4 * blocks


def optimizer_bytes(elems: int, bits: int, adam8bit: bool) -> int:
    if elems == 0:
        return 0
    if adam8bit:
        # two 8-bit moments share the element count; one fp32 absmax per block
        return elems + 4 * math.ceil(elems / ADAM8_BLOCK)
    return _bits_to_bytes(elems * bits)


def layer_counts(spec: LayerSpec, method: str) -> tuple[int, int, int, int]:
    """(weights, optimizer, gradients, frozen-quantizable) element counts."""
    if method not in METHODS:
        raise MemoryModelError(f"unknown method {method!r}")
    m, n = sorted((spec.m, spec.n))
    r = spec.r
    if not spec.adapted:
        return m * n, 2 * m * n, m * n, 0
    if r == 0:
        return m * n, 0, 0, m * n
    if method == "full_adam":
        return m * n, 2 * m * n, m * n, 0
    if method == "galore":
        return m * n, m * r + 2 * n * r, m * n, 0
    if method == "lora":
        return m * n + m * r + n * r, 2 * m * r + 2 * n * r, m * r + n * r, m * n
    return m * n + m * r + n * r, 2 * n * r, n * r, m * n + m * r


def estimate_layer(
    spec: LayerSpec,
    method: str,
    widths: Widths = Widths(),
    nf4: bool = False,
    adam8bit: bool = False,
    double_quant: bool = True,
) -> MemoryEstimate:
    weights, optim, grads, frozen = layer_counts(spec, method)
    if nf4 and method in QUANTIZABLE and frozen:
        if method == "loqt" and spec.r:
            m, n = sorted((spec.m, spec.n))
            wb = nf4_bytes(m * n, double_quant) + nf4_bytes(m * spec.r, double_quant)
        else:
            wb = nf4_bytes(frozen, double_quant)
        wb += _bits_to_bytes((weights - frozen) * widths.weight_bits)
    else:
        wb = _bits_to_bytes(weights * widths.weight_bits)
    gb = _bits_to_bytes(grads * widths.grad_bits)
    return MemoryEstimate(
        weights, optim, grads, wb, optimizer_bytes(optim, widths.optim_bits, adam8bit), gb, gb
    )


@dataclass
class ArchSpec:
    name: str
    layers: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return sum(l.m * l.n for l in self.layers)


# hidden, intermediate, heads, layers, rank
LLAMA_TABLE = {
    "60m": (512, 1376, 8, 8, 128),
    "130m": (768, 2048, 12, 12, 256),
    "350m": (1024, 2736, 16, 24, 256),
    "1b": (2048, 5461, 32, 24, 512),
    "7b": (4096, 11008, 32, 32, 1024),
    "13b": (5120, 13824, 40, 40, 1536),
}
LLAMA_VOCAB = 32000


def llama_arch(hidden, intermediate, n_layers, rank, vocab=LLAMA_VOCAB, name="llama") -> ArchSpec:
    """LLaMA-style blocks: q/k/v/o and SwiGLU gate/up/down are adapted."""
    d, f = hidden, intermediate
    layers = [LayerSpec(vocab, d, 0, False, "tok_emb")]
    for i in range(n_layers):
        for proj in ("q", "k", "v", "o"):
            layers.append(LayerSpec(d, d, min(rank, d), True, f"{i}.attn.{proj}"))
        layers.append(LayerSpec(d, f, min(rank, d, f), True, f"{i}.mlp.gate"))
        layers.append(LayerSpec(d, f, min(rank, d, f), True, f"{i}.mlp.up"))
        layers.append(LayerSpec(f, d, min(rank, d, f), True, f"{i}.mlp.down"))
        layers.append(LayerSpec(1, d, 0, False, f"{i}.ln1"))
        layers.append(LayerSpec(1, d, 0, False, f"{i}.ln2"))
    layers.append(LayerSpec(1, d, 0, False, "ln_f"))
    layers.append(LayerSpec(d, vocab, 0, False, "head"))
    return ArchSpec(name, layers)


def named_arch(name: str, rank: int | None = None) -> ArchSpec:
    key = name.lower()
    if key not in LLAMA_TABLE:
        raise MemoryModelError(f"unknown architecture {name!r}; known: {', '.join(LLAMA_TABLE)}")
    hidden, inter, _heads, n_layers, default_rank = LLAMA_TABLE[key]
    return llama_arch(hidden, inter, n_layers, rank or default_rank, name=key)


def arch_from_file(path, rank: int | None = None) -> ArchSpec:
    """JSON: either ``{"layers": [{"m","n","r","adapted","name"}, ...]}`` or
    ``{"hidden", "intermediate", "layers", "rank", "vocab"}``."""
    data = json.loads(Path(path).read_text())
    name = data.get("name", Path(path).stem)
    if isinstance(data.get("layers"), list):
        layers = [
            LayerSpec(int(l["m"]), int(l["n"]), int(rank if rank is not None and l.get("adapted", True)
                                                    else l.get("r", 0)),
                      bool(l.get("adapted", True)), l.get("name", ""))
            for l in data["layers"]
        ]
        return ArchSpec(name, layers)
    try:
        return llama_arch(int(data["hidden"]), int(data["intermediate"]), int(data["layers"]),
                          int(rank or data["rank"]), int(data.get("vocab", LLAMA_VOCAB)), name)
    except KeyError as exc:
        raise MemoryModelError(f"architecture file {path} lacks key {exc}") from None


def resolve_arch(name_or_path: str, rank: int | None = None) -> ArchSpec:
    if name_or_path.lower() in LLAMA_TABLE:
        return named_arch(name_or_path, rank)
    if Path(name_or_path).is_file():
        return arch_from_file(name_or_path, rank)
    raise MemoryModelError(f"unknown architecture {name_or_path!r}")


def estimate_model(
    arch: ArchSpec,
    method: str,
    nf4: bool = False,
    adam8bit: bool = False,
    per_layer_grads: bool = False,
    widths: Widths = Widths(),
    double_quant: bool = True,
) -> MemoryEstimate:
    total = MemoryEstimate()
    for spec in arch.layers:
        total = total + estimate_layer(spec, method, widths, nf4, adam8bit, double_quant)
    if per_layer_grads:
        total.gradient_bytes = total.max_layer_gradient_bytes
    return total
