"""Dense linear algebra on 2-D float32 arrays.

Matrices are plain ``numpy.ndarray`` objects of dtype float32 with shape
``(rows, cols)``.  numpy supplies storage and BLAS matmul; the SVD and the
pseudo-inverse are implemented here so that their behaviour (ordering, signs,
rank cutoff) is fully determined by this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32

SVD_TOL = 1e-10
SVD_MAX_SWEEPS = 100


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConvergenceError(RuntimeError):
    """An iterative decomposition hit its iteration cap."""


class RankError(ValueError):
    """Requested rank is outside ``[1, min(rows, cols)]``."""


def as_matrix(a, dtype=DTYPE) -> np.ndarray:
    """Coerce ``a`` to a 2-D array of ``dtype``; 1-D input becomes a row."""
    a = np.asarray(a, dtype=dtype)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} of shape {a.shape} contains NaN or Inf")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return (a * c).astype(a.dtype, copy=False)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def frobenius_norm(a: np.ndarray) -> float:
    # accumulate in float64 so the norm itself adds no float32 rounding
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_F / max(||b||_F, tiny)``."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    denom = max(frobenius_norm(np.asarray(b, dtype=np.float64)), 1e-30)
    return frobenius_norm(diff) / denom


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``k = min(m, n)``."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s[None, :]) @ self.vt


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament pairings: n-1 rounds of n/2 disjoint pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        left = np.array(players[: n // 2])
        right = np.array(players[n // 2 :][::-1])
        rounds.append((np.minimum(left, right), np.maximum(left, right)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi on the columns of ``a`` (m >= n), float64.

    Returns the rotated matrix (mutually orthogonal columns) and the
    accumulated right rotation ``v`` with ``a_in @ v == a_out``.
    """
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    if n == 1:
        return work, v
    padded = n + (n % 2)
    if padded != n:
        # a dummy zero column never rotates (its norm is zero)
        work = np.concatenate([work, np.zeros((m, 1))], axis=1)
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _round_robin(padded)
    # columns below eps * ||A|| are zero at working precision; rotating their
    # rounding noise never converges
    floor = (np.finfo(np.float64).eps * np.sqrt(np.einsum("ij,ij->", a, a))) ** 2
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for i, j in rounds:
            ai = work[:, i]
            aj = work[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = (np.abs(gamma) > SVD_TOL * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not np.any(active):
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            new_i = c * ai - s * aj
            new_j = s * ai + c * aj
            work[:, i] = new_i
            work[:, j] = new_j
            vi = v[:, i]
            vj = v[:, j]
            v[:, i] = c * vi - s * vj
            v[:, j] = s * vi + c * vj
        if not rotated:
            return work[:, :n], v[:n, :n]
    raise ConvergenceError(
        f"Jacobi SVD of a {a.shape[0]}x{a.shape[1]} matrix did not converge "
        f"in {SVD_MAX_SWEEPS} sweeps"
    )


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not in ``keep`` by an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    fill = []
    candidate = 0
    while len(basis) + len(fill) < k:
        e = np.zeros(m)
        e[candidate] = 1.0
        candidate += 1
        for _ in range(2):
            for q in basis + fill:
                e -= (q @ e) * q
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            fill.append(e / norm)
    out = u.copy()
    it = iter(fill)
    for j in range(k):
        if not keep[j]:
            out[:, j] = next(it)
    return out


def _svd64(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        vt_t, s, u_t = _svd64(a.T)
        return u_t.T, s, vt_t.T
    rotated, v = _jacobi_columns(a)
    s = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    rotated = rotated[:, order]
    v = v[:, order]
    cutoff = max(m, n) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    nonzero = s > cutoff
    u = np.zeros((m, n))
    u[:, nonzero] = rotated[:, nonzero] / s[nonzero]
    if not np.all(nonzero):
        u = _complete_basis(u, nonzero)
    # sign convention: largest-magnitude entry of each u column is >= 0
    pivot = np.argmax(np.abs(u), axis=0)
    flip = u[pivot, np.arange(n)] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return u, s, v.T


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD with singular values sorted non-increasing.

    Signs are fixed so that in every column of ``u`` the entry of largest
    magnitude (lowest index on ties) is non-negative, which makes the result
    a deterministic function of the input.
    """
    a = as_matrix(a)
    check_finite(a)
    u, s, vt = _svd64(a)
    return SvdResult(u.astype(DTYPE), s.astype(DTYPE), vt.astype(DTYPE))


def truncated_left_factor(g: np.ndarray, r: int) -> np.ndarray:
    """First ``r`` left singular vectors of ``g`` as an ``m x r`` matrix."""
    g = as_matrix(g)
    k = min(g.shape)
    if not 1 <= r <= k:
        raise RankError(f"rank {r} outside [1, {k}] for a {g.shape[0]}x{g.shape[1]} matrix")
    check_finite(g, "gradient")
    u, _, _ = _svd64(g)
    return np.ascontiguousarray(u[:, :r], dtype=DTYPE)


def pseudo_inverse(a: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via the SVD.

    Singular values at or below ``max(m, n) * eps32 * s_max`` count as zero.
    """
    a = as_matrix(a)
    check_finite(a)
    u, s, vt = _svd64(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]), dtype=DTYPE)
    rtol = max(a.shape) * np.finfo(DTYPE).eps * s[0]
    inv = np.where(s > rtol, 1.0 / np.where(s > rtol, s, 1.0), 0.0)
    return ((vt.T * inv[None, :]) @ u.T).astype(DTYPE)
