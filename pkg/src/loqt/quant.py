"""NF4 blockwise quantization with optional double quantization of scales.

A matrix is flattened row-major and cut into blocks of 64 elements.  Each
block is divided by its absmax and every element is replaced by the index of
the nearest NF4 level.  Block scales can themselves be stored as 8-bit affine
codes, one (offset, step) pair per chunk of 256 scales.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import DTYPE, as_matrix, check_finite, frobenius_norm

BLOCK_SIZE = 64
SCALE_CHUNK = 256

# Published NF4 levels (QLoRA / bitsandbytes), float32.
NF4_LEVELS = (
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
)

FLAG_DOUBLE_QUANT = 1
_HEADER = struct.Struct("<IIII")


class FormatError(ValueError):
    """Malformed quantized payload."""


@dataclass(frozen=True)
class Nf4Codebook:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=DTYPE)
        if v.shape != (16,) or not np.all(np.diff(v) > 0):
            raise ValueError("NF4 codebook needs 16 strictly increasing values")
        object.__setattr__(self, "values", v)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        """Index of the closest level for each entry; ties go to the lower index."""
        x = np.asarray(x, dtype=DTYPE)
        flat = x.reshape(-1)
        out = np.empty(flat.shape, dtype=np.uint8)
        step = 1 << 16
        for start in range(0, flat.size, step):
            chunk = flat[start : start + step]
            dist = np.abs(chunk[:, None] - self.values[None, :])
            out[start : start + step] = np.argmin(dist, axis=1)
        return out.reshape(x.shape)

    def max_half_gap(self) -> float:
        return float(np.max(np.diff(self.values.astype(np.float64))) / 2.0)


_CODEBOOK: Optional[Nf4Codebook] = None


def build_codebook() -> Nf4Codebook:
    return Nf4Codebook(np.array(NF4_LEVELS, dtype=DTYPE))


def default_codebook() -> Nf4Codebook:
    global _CODEBOOK
    if _CODEBOOK is None:
        _CODEBOOK = build_codebook()
    return _CODEBOOK


def set_default_codebook(codebook: Optional[Nf4Codebook]) -> None:
    """Swap the process-wide codebook (``None`` restores NF4).  Test hook."""
    global _CODEBOOK
    _CODEBOOK = codebook


@dataclass(frozen=True)
class DoubleQuantScales:
    """Block scales stored as uint8 codes with a per-chunk affine map."""

    codes: np.ndarray  # uint8, one per block
    offsets: np.ndarray  # float32, one per chunk (chunk minimum)
    steps: np.ndarray  # float32, one per chunk ((max - min) / 255)
    chunk: int = SCALE_CHUNK


def double_quantize_scales(scales: np.ndarray, chunk: int = SCALE_CHUNK) -> DoubleQuantScales:
    scales = np.asarray(scales, dtype=DTYPE).reshape(-1)
    n_chunks = max(1, math.ceil(scales.size / chunk))
    codes = np.zeros(scales.size, dtype=np.uint8)
    offsets = np.zeros(n_chunks, dtype=DTYPE)
    steps = np.zeros(n_chunks, dtype=DTYPE)
    for c in range(n_chunks):
        part = scales[c * chunk : (c + 1) * chunk]
        if part.size == 0:
            continue
        lo = part.min()
        hi = part.max()
        offsets[c] = lo
        if hi > lo:
            step = DTYPE((hi - lo) / DTYPE(255))
            steps[c] = step
            q = np.floor((part - lo) / step + 0.5)
            codes[c * chunk : c * chunk + part.size] = np.clip(q, 0, 255).astype(np.uint8)
    return DoubleQuantScales(codes, offsets, steps, chunk)


def dequantize_scales(dq: DoubleQuantScales) -> np.ndarray:
    chunk_of = np.arange(dq.codes.size) // dq.chunk
    return (dq.offsets[chunk_of] + dq.codes.astype(DTYPE) * dq.steps[chunk_of]).astype(DTYPE)


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Two 4-bit codes per byte, low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size and codes.max() >= 16:
        raise FormatError(f"code index {int(codes.max())} does not fit in 4 bits")
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


@dataclass(frozen=True)
class QuantizedMatrix:
    rows: int
    cols: int
    packed: np.ndarray
    scales: Optional[np.ndarray] = None
    double_quant: Optional[DoubleQuantScales] = None
    block_size: int = BLOCK_SIZE

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.rows * self.cols / self.block_size)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.rows * self.cols)

    def block_scales(self) -> np.ndarray:
        if self.double_quant is not None:
            return dequantize_scales(self.double_quant)
        return self.scales

    @classmethod
    def from_codes(cls, rows, cols, codes, scales, block_size=BLOCK_SIZE) -> "QuantizedMatrix":
        codes = np.asarray(codes).reshape(-1)
        if codes.size != rows * cols:
            raise FormatError(f"{codes.size} codes for a {rows}x{cols} matrix")
        if codes.size and (codes.min() < 0 or codes.max() >= 16):
            raise FormatError("code index outside [0, 16)")
        scales = np.asarray(scales, dtype=DTYPE)
        if scales.size != math.ceil(rows * cols / block_size):
            raise FormatError("scale count does not match block count")
        return cls(rows, cols, pack_codes(codes), scales, None, block_size)

    def nbytes(self) -> int:
        return len(to_bytes(self))


def quantize(
    w: np.ndarray,
    double_quant: bool = False,
    codebook: Optional[Nf4Codebook] = None,
    block_size: int = BLOCK_SIZE,
) -> QuantizedMatrix:
    w = as_matrix(w)
    check_finite(w)
    codebook = codebook or default_codebook()
    rows, cols = w.shape
    flat = w.reshape(-1)
    n = flat.size
    n_blocks = math.ceil(n / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=DTYPE)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.max(np.abs(blocks), axis=1)
    safe = np.where(absmax > 0, absmax, DTYPE(1))
    normalized = blocks / safe[:, None]
    codes = codebook.nearest(normalized)
    # all-zero blocks: scale 0 and the code of level 0.0
    zero_code = int(codebook.nearest(np.zeros(1, dtype=DTYPE))[0])
    codes[absmax == 0] = zero_code
    codes = codes.reshape(-1)[:n]
    absmax = absmax.astype(DTYPE)
    if double_quant:
        return QuantizedMatrix(rows, cols, pack_codes(codes), None,
                               double_quantize_scales(absmax), block_size)
    return QuantizedMatrix(rows, cols, pack_codes(codes), absmax, None, block_size)


def dequantize(q: QuantizedMatrix, codebook: Optional[Nf4Codebook] = None) -> np.ndarray:
    codebook = codebook or default_codebook()
    n = q.rows * q.cols
    codes = q.codes()
    if codes.size != n:
        raise FormatError(f"expected {n} codes, found {codes.size}")
    scales = q.block_scales()
    if scales is None or scales.size != q.n_blocks:
        raise FormatError("block scale count does not match block count")
    per_elem = np.repeat(scales, q.block_size)[:n]
    return (codebook.values[codes] * per_elem).reshape(q.rows, q.cols)


def quantization_error(w: np.ndarray, double_quant: bool = False) -> float:
    w = as_matrix(w)
    return frobenius_norm(dequantize(quantize(w, double_quant)) - w)


def to_bytes(q: QuantizedMatrix) -> bytes:
    flags = FLAG_DOUBLE_QUANT if q.double_quant is not None else 0
    parts = [_HEADER.pack(q.rows, q.cols, q.block_size, flags), q.packed.tobytes()]
    if q.double_quant is not None:
        dq = q.double_quant
        parts += [
            struct.pack("<I", dq.chunk),
            dq.codes.tobytes(),
            dq.offsets.astype("<f4").tobytes(),
            dq.steps.astype("<f4").tobytes(),
        ]
    else:
        parts.append(q.scales.astype("<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, offset: int = 0) -> tuple[QuantizedMatrix, int]:
    """Parse one quantized matrix; returns it and the offset just past it."""

    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError("truncated quantized-matrix payload")
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    rows, cols, block_size, flags = _HEADER.unpack(take(_HEADER.size))
    if rows == 0 or cols == 0 or block_size == 0 or flags & ~FLAG_DOUBLE_QUANT:
        raise FormatError(f"bad quantized-matrix header {(rows, cols, block_size, flags)}")
    n = rows * cols
    n_blocks = math.ceil(n / block_size)
    packed = np.frombuffer(take((n + 1) // 2), dtype=np.uint8).copy()
    if flags & FLAG_DOUBLE_QUANT:
        (chunk,) = struct.unpack("<I", take(4))
        if chunk == 0:
            raise FormatError("zero scale-chunk size")
        n_chunks = max(1, math.ceil(n_blocks / chunk))
        codes = np.frombuffer(take(n_blocks), dtype=np.uint8).copy()
        offsets = np.frombuffer(take(4 * n_chunks), dtype="<f4").astype(DTYPE)
        steps = np.frombuffer(take(4 * n_chunks), dtype="<f4").astype(DTYPE)
        q = QuantizedMatrix(rows, cols, packed, None,
                            DoubleQuantScales(codes, offsets, steps, chunk), block_size)
    else:
        scales = np.frombuffer(take(4 * n_blocks), dtype="<f4").astype(DTYPE)
        q = QuantizedMatrix(rows, cols, packed, scales, None, block_size)
    return q, offset
