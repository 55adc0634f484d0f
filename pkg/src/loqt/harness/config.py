"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored.  Values are parsed according to
the type of the matching :class:`RunConfig` field; booleans accept
``true/false/yes/no/1/0``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

TASKS = ("char-lm", "synth-regression")
METHODS = ("full", "galore", "lora-frozen", "loqt", "loqt-nq")

# keys that do not change what a run computes
_NON_DIGEST = {"output_dir", "timing", "checkpoint_every"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "char-lm"
    method: str = "loqt"
    # decoder
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 172
    context: int = 128
    corpus: str = ""
    # regression MLP; first entry is the input dimension
    mlp_dims: str = "32,64,32"
    activation: str = "tanh"
    noise: float = 0.01
    # adapters
    rank: int = 16
    scale: float = 0.5
    tau: int = 100
    psi: float = 1.2
    cap: int = 2500
    literal_schedule: bool = False
    quantize_w: bool = True
    quantize_p: bool = True
    double_quant: bool = False
    compensate: bool = True
    comp_iters: int = 5
    reset_adam: bool = True
    galore_reset_moments: bool = False
    # optimization
    lr: float = 0.01
    warmup: float = 0.10
    lr_floor: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 3000
    batch_size: int = 64
    seed: int = 1
    # bookkeeping
    eval_every: int = 100
    eval_batches: int = 8
    checkpoint_every: int = 0
    output_dir: str = "runs/default"
    timing: bool = False

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup must lie in [0, 1)")
        if not 0.0 < self.lr_floor <= 1.0:
            raise ConfigError("lr_floor must lie in (0, 1]")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        for key in ("steps", "batch_size", "rank", "tau", "cap", "eval_every", "eval_batches",
                    "d_model", "n_layers", "n_heads", "d_ff", "context", "comp_iters"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.activation not in ("tanh", "relu", "identity"):
            raise ConfigError(f"activation must be tanh, relu or identity, got {self.activation!r}")
        if self.psi < 1.0:
            raise ConfigError("psi must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        try:
            dims = self.dims()
        except ValueError:
            raise ConfigError(f"mlp_dims must be comma-separated integers, got {self.mlp_dims!r}")
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigError("mlp_dims needs at least two positive sizes")
        if self.task == "synth-regression" and dims[0] != dims[-1]:
            raise ConfigError("regression MLP must map dim -> dim")
        return self

    def dims(self) -> list[int]:
        return [int(x) for x in self.mlp_dims.split(",") if x.strip()]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    def digest(self) -> bytes:
        text = "".join(
            f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self) if f.name not in _NON_DIGEST
        )
        return hashlib.sha256(text.encode()).digest()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_pairs(pairs, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in pairs:
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    return cfg.validate()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append((lineno, line))
    return parse_pairs(pairs, base)


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cfg = parse_config(path.read_text())
    if overrides:
        cfg = parse_pairs([(f"--override {i}", o) for i, o in enumerate(overrides, 1)], cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
