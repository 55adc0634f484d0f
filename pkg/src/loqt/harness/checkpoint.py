"""Binary checkpoints for a :class:`Trainer`.

Layout (little-endian)::

    b"LOQT"  u16 version  32-byte config digest  u32 record count
    record: u16 name length, name (utf-8), u8 kind, u64 payload length, payload

Kinds: 0 dense float32 (u8 ndim, u32 dims, data), 1 NF4 matrix in the
:mod:`loqt.quant` layout, 2 int64 array, 3 float64 array (same shape prefix
as dense).  Loading parses and validates everything before touching the
trainer, so a bad file never leaves a half-restored run.
"""

from __future__ import annotations

import os
import struct
import warnings
from pathlib import Path

import numpy as np

from ..nn import LEFT, RIGHT, Linear, LoQTLinear, Param
from ..optim import AdamState, GaLoreState
from ..quant import FormatError, QuantizedMatrix, from_bytes, to_bytes

MAGIC = b"LOQT"
VERSION = 1
KIND_DENSE, KIND_NF4, KIND_INT, KIND_FLOAT = 0, 1, 2, 3

_HEAD = struct.Struct("<4sH32sI")
_REC = struct.Struct("<H")
_REC_TAIL = struct.Struct("<BQ")
_ORIENT = {LEFT: 0, RIGHT: 1}
_ORIENT_BACK = {v: k for k, v in _ORIENT.items()}
_ARRAY_DTYPE = {KIND_DENSE: "<f4", KIND_INT: "<i8", KIND_FLOAT: "<f8"}


class DigestMismatchWarning(UserWarning):
    """Checkpoint was written by a run with a different configuration."""


def _encode_array(arr: np.ndarray, kind: int) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_ARRAY_DTYPE[kind])
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _decode_array(payload: bytes, kind: int) -> np.ndarray:
    if not payload:
        raise FormatError("empty array payload")
    ndim = payload[0]
    end = 1 + 4 * ndim
    if len(payload) < end:
        raise FormatError("truncated array shape")
    shape = struct.unpack_from(f"<{ndim}I", payload, 1)
    dtype = np.dtype(_ARRAY_DTYPE[kind])
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != end + count * dtype.itemsize:
        raise FormatError(f"array payload of {len(payload)} bytes does not match shape {shape}")
    arr = np.frombuffer(payload, dtype=dtype, offset=end, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def _kind_of(value) -> int:
    if isinstance(value, QuantizedMatrix):
        return KIND_NF4
    if value.dtype == np.float32:
        return KIND_DENSE
    if value.dtype.kind in "iu":
        return KIND_INT
    return KIND_FLOAT


def encode(records: dict, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    out = [_HEAD.pack(MAGIC, VERSION, digest, len(records))]
    for name, value in records.items():
        kind = _kind_of(value)
        payload = to_bytes(value) if kind == KIND_NF4 else _encode_array(value, kind)
        raw = name.encode()
        out += [_REC.pack(len(raw)), raw, _REC_TAIL.pack(kind, len(payload)), payload]
    return b"".join(out)


def decode(buf: bytes) -> tuple[bytes, dict]:
    """Parse a checkpoint into ``(digest, {name: array | QuantizedMatrix})``."""
    if len(buf) < _HEAD.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, digest, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    records = {}
    for _ in range(count):
        if pos + _REC.size > len(buf):
            raise FormatError("truncated record header")
        (n,) = _REC.unpack_from(buf, pos)
        pos += _REC.size
        if pos + n + _REC_TAIL.size > len(buf):
            raise FormatError("truncated record header")
        name = buf[pos:pos + n].decode()
        pos += n
        kind, length = _REC_TAIL.unpack_from(buf, pos)
        pos += _REC_TAIL.size
        if pos + length > len(buf):
            raise FormatError(f"record {name!r} is truncated")
        payload = bytes(buf[pos:pos + length])
        pos += length
        if kind == KIND_NF4:
            q, used = from_bytes(payload)
            if used != length:
                raise FormatError(f"record {name!r} has trailing bytes")
            records[name] = q
        elif kind in _ARRAY_DTYPE:
            records[name] = _decode_array(payload, kind)
        else:
            raise FormatError(f"record {name!r} has unknown kind {kind}")
    if pos != len(buf):
        raise FormatError("trailing bytes after the last record")
    return digest, records


# -- trainer state ---------------------------------------------------------


def _scalar_int(x: int) -> np.ndarray:
    return np.array([x], dtype=np.int64)


def _scalar_float(x: float) -> np.ndarray:
    return np.array([x], dtype=np.float64)


def trainer_records(trainer) -> dict:
    model = trainer.model
    rec = {"meta.step": _scalar_int(trainer.step)}
    for name, p in model.params.items():
        rec[f"param.{name}"] = p.value
    for name, slot in model.slots.items():
        if isinstance(slot, Linear):
            rec[f"slot.{name}.weight"] = slot.weight.value
        else:
            rec[f"slot.{name}.W"] = slot.w
            rec[f"slot.{name}.P"] = slot.p
            rec[f"slot.{name}.B"] = slot.b.value
            rec[f"slot.{name}.s"] = _scalar_float(slot.s)
            rec[f"slot.{name}.orient"] = _scalar_int(_ORIENT[slot.orientation])
    for name, st in trainer.optimizer.states.items():
        rec[f"adam.{name}.m"] = st.m
        rec[f"adam.{name}.v"] = st.v
        rec[f"adam.{name}.t"] = _scalar_int(st.t)
    for name, g in trainer.galore.items():
        rec[f"galore.{name}.p"] = g.p
        rec[f"galore.{name}.m"] = g.adam.m
        rec[f"galore.{name}.v"] = g.adam.v
        rec[f"galore.{name}.t"] = _scalar_int(g.adam.t)
        rec[f"galore.{name}.orient"] = _scalar_int(_ORIENT[g.orientation])
        rec[f"galore.{name}.scale"] = _scalar_float(g.scale)
        rec[f"galore.{name}.since"] = _scalar_int(g.steps_since_refresh)
    return rec


def save(trainer, path) -> None:
    """Write atomically: a crash mid-write never clobbers the previous file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(trainer_records(trainer), trainer.cfg.digest()))
    os.replace(tmp, path)


def _groups(records: dict, prefix: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for key, value in records.items():
        if key.startswith(prefix):
            name, field = key[len(prefix):].rsplit(".", 1)
            out.setdefault(name, {})[field] = value
    return out


def _need(group: dict, keys, where: str):
    missing = [k for k in keys if k not in group]
    if missing:
        raise FormatError(f"{where}: missing {', '.join(missing)}")
    return [group[k] for k in keys]


def _dense(x, where):
    if isinstance(x, QuantizedMatrix):
        raise FormatError(f"{where}: expected a dense tensor")
    return x


def _build_state(trainer, records: dict):
    """Turn records into replacement objects, validating against the live model."""
    model = trainer.model
    hyper = trainer.optimizer.hyper
    if "meta.step" not in records:
        raise FormatError("missing meta.step")
    step = int(records["meta.step"][0])

    params = {}
    for name, p in model.params.items():
        key = f"param.{name}"
        if key not in records:
            raise FormatError(f"missing {key}")
        value = _dense(records[key], key)
        if value.shape != p.shape:
            raise FormatError(f"{key}: shape {value.shape} vs model {p.shape}")
        params[name] = value

    slots = {}
    groups = _groups(records, "slot.")
    for name, live in model.slots.items():
        g = groups.get(name)
        if g is None:
            raise FormatError(f"missing slot {name}")
        if "weight" in g:
            w = _dense(g["weight"], name)
            if w.shape != live.shape:
                raise FormatError(f"slot {name}: shape {w.shape} vs model {live.shape}")
            slots[name] = Linear(w)
            continue
        w, p, b, s, orient = _need(g, ("W", "P", "B", "s", "orient"), f"slot {name}")
        if w.shape != live.shape:
            raise FormatError(f"slot {name}: shape {w.shape} vs model {live.shape}")
        o = int(orient[0])
        if o not in _ORIENT_BACK:
            raise FormatError(f"slot {name}: bad orientation {o}")
        try:
            slots[name] = LoQTLinear(w, p, _dense(b, name), float(s[0]), _ORIENT_BACK[o])
        except ValueError as exc:
            raise FormatError(f"slot {name}: {exc}") from None

    adam = {}
    for name, g in _groups(records, "adam.").items():
        m, v, t = _need(g, ("m", "v", "t"), f"adam {name}")
        if m.shape != v.shape:
            raise FormatError(f"adam {name}: moment shapes differ")
        adam[name] = AdamState(m, v, int(t[0]), **hyper)

    galore = {}
    for name, g in _groups(records, "galore.").items():
        p, m, v, t, o, scale, since = _need(
            g, ("p", "m", "v", "t", "orient", "scale", "since"), f"galore {name}"
        )
        if int(o[0]) not in _ORIENT_BACK:
            raise FormatError(f"galore {name}: bad orientation")
        galore[name] = GaLoreState(p, AdamState(m, v, int(t[0]), **hyper),
                                   _ORIENT_BACK[int(o[0])], float(scale[0]), int(since[0]))
    return step, params, slots, adam, galore


def load(trainer, path, force: bool = False) -> int:
    """Restore ``trainer`` from ``path`` and return the step it resumes at."""
    buf = Path(path).read_bytes()
    digest, records = decode(buf)
    if digest != trainer.cfg.digest() and not force:
        warnings.warn(
            f"checkpoint {path} was written with a different configuration",
            DigestMismatchWarning,
            stacklevel=2,
        )
    step, params, slots, adam, galore = _build_state(trainer, records)
    # nothing below can fail, so the trainer is either fully restored or untouched
    for name, value in params.items():
        trainer.model.params[name] = Param(value)
    trainer.model.slots.update(slots)
    trainer.optimizer.states = adam
    trainer.galore = galore
    trainer.step = step
    return step


def state_equal(a, b) -> bool:
    """Bitwise comparison of two trainers' persistent state."""
    ra, rb = trainer_records(a), trainer_records(b)
    if ra.keys() != rb.keys():
        return False
    for k in ra:
        x, y = ra[k], rb[k]
        if isinstance(x, QuantizedMatrix) or isinstance(y, QuantizedMatrix):
            if not (isinstance(x, QuantizedMatrix) and isinstance(y, QuantizedMatrix)):
                return False
            if to_bytes(x) != to_bytes(y):
                return False
        elif x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True
