"""Matrix-calculus kernel.

Half-vectorization and the elimination, duplication and commutation operators
are index maps over column-major storage. Every function accepts a single
matrix or a stack of matrices along leading axes.
"""

from __future__ import annotations

from functools import cache
import math

import numpy as np
import numpy.typing as npt
from scipy.linalg import solve_triangular

from .exceptions import NotPositiveDefinite

type FloatArray = npt.NDArray[np.float64]
type IntArray = npt.NDArray[np.intp]


@cache
def half_indices(r: int) -> tuple[IntArray, IntArray]:
    """Return (rows, cols) of the lower triangle in column-major order."""
    cols, rows = np.triu_indices(r)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


@cache
def diag_positions(r: int) -> IntArray:
    """Return the positions of the diagonal entries inside a half-vector."""
    rows, cols = half_indices(r)
    positions = np.flatnonzero(rows == cols)
    positions.flags.writeable = False
    return positions


@cache
def _dup_map(r: int) -> IntArray:
    rows, cols = half_indices(r)
    lookup = np.empty((r, r), dtype=np.intp)
    lookup[rows, cols] = np.arange(rows.size)
    lookup[cols, rows] = np.arange(rows.size)
    # vec order: column j, row i -> lookup[i, j]
    mapping = lookup.T.reshape(-1)
    mapping.flags.writeable = False
    return mapping


@cache
def _comm_map(r: int) -> IntArray:
    mapping = np.arange(r * r).reshape(r, r).T.reshape(-1)
    mapping.flags.writeable = False
    return mapping


def half_length(r: int) -> int:
    """Return r(r+1)/2."""
    return r * (r + 1) // 2


def order_from_half(length: int) -> int:
    """Return r such that r(r+1)/2 equals length."""
    r = (math.isqrt(8 * length + 1) - 1) // 2
    if half_length(r) != length:
        raise ValueError(f"{length} is not a triangular number")
    return r


def _order_from_square(length: int) -> int:
    r = math.isqrt(length)
    if r * r != length:
        raise ValueError(f"{length} is not a perfect square")
    return r


def vec(a: FloatArray) -> FloatArray:
    """Stack the columns of a (stack of) square matrices."""
    r = a.shape[-1]
    return np.swapaxes(a, -1, -2).reshape(*a.shape[:-2], r * r)


def unvec(x: FloatArray, r: int) -> FloatArray:
    """Inverse of vec."""
    if x.shape[-1] != r * r:
        raise ValueError(f"expected length {r * r}, got {x.shape[-1]}")
    return np.swapaxes(x.reshape(*x.shape[:-1], r, r), -1, -2)


def halfvec(a: FloatArray) -> FloatArray:
    """Return v(A): the lower triangle of A stacked column by column."""
    rows, cols = half_indices(a.shape[-1])
    return a[..., rows, cols]


def unhalfvec(h: FloatArray, r: int | None = None) -> FloatArray:
    """Return the lower-triangular matrix whose v(·) is h."""
    order = order_from_half(h.shape[-1]) if r is None else r
    if h.shape[-1] != half_length(order):
        raise ValueError(f"expected length {half_length(order)}, got {h.shape[-1]}")
    rows, cols = half_indices(order)
    out = np.zeros((*h.shape[:-1], order, order))
    out[..., rows, cols] = h
    return out


def elim_apply(x: FloatArray, r: int) -> FloatArray:
    """Apply the elimination operator: E_r vec(A) = v(A)."""
    if x.shape[-1] != r * r:
        raise ValueError(f"expected length {r * r}, got {x.shape[-1]}")
    rows, cols = half_indices(r)
    return x[..., cols * r + rows]


def elim_transpose_apply(h: FloatArray) -> FloatArray:
    """Apply E_rᵀ: place a half-vector into vec of a lower-triangular matrix."""
    return vec(unhalfvec(h))


def dup_apply(h: FloatArray) -> FloatArray:
    """Apply the duplication operator: D_r v(A) = vec(A) for symmetric A."""
    r = order_from_half(h.shape[-1])
    return h[..., _dup_map(r)]


def comm_apply(x: FloatArray, r: int | None = None) -> FloatArray:
    """Apply the commutation operator: K_r vec(A) = vec(Aᵀ)."""
    order = _order_from_square(x.shape[-1]) if r is None else r
    if x.shape[-1] != order * order:
        raise ValueError(f"expected length {order * order}, got {x.shape[-1]}")
    return x[..., _comm_map(order)]


def sym_apply(x: FloatArray, r: int | None = None) -> FloatArray:
    """Apply N_r = (K_r + I)/2."""
    return 0.5 * (comm_apply(x, r) + x)


def dg(a: FloatArray) -> FloatArray:
    """Return the diagonal part of A as a matrix."""
    return a * np.eye(a.shape[-1])


def tri_lower(a: FloatArray) -> FloatArray:
    """Return the lower triangle of A, diagonal included."""
    return np.tril(a)


def k_op(a: FloatArray) -> FloatArray:
    """Return k(A) = lower(A) − dg(A)/2."""
    return np.tril(a) - 0.5 * dg(a)


def symmetrize(a: FloatArray) -> FloatArray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky(s: FloatArray) -> FloatArray:
    """Lower Cholesky factor of a symmetric positive definite (stack of) matrix."""
    sym = symmetrize(np.asarray(s, dtype=np.float64))
    if not np.all(np.isfinite(sym)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        factor = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err) or "leading minor is not positive") from err
    if not np.all(np.diagonal(factor, axis1=-2, axis2=-1) > 0.0):
        raise NotPositiveDefinite("Cholesky pivot is not positive")
    return factor


def solve_lower(lower: FloatArray, b: FloatArray, *, trans: bool = False) -> FloatArray:
    """Solve L x = b (or Lᵀ x = b) for lower-triangular L.

    b may be a vector (matching L's leading axes) or a matrix.
    """
    vector = b.ndim == lower.ndim - 1
    if lower.ndim == 2:
        return np.asarray(solve_triangular(lower, b, lower=True, trans=1 if trans else 0), dtype=np.float64)
    mat = np.swapaxes(lower, -1, -2) if trans else lower
    rhs = b[..., None] if vector else b
    out = np.linalg.solve(mat, rhs)
    return out[..., 0] if vector else out


def tri_inverse(lower: FloatArray) -> FloatArray:
    """Inverse of a lower-triangular (stack of) matrix via triangular solves."""
    eye = np.broadcast_to(np.eye(lower.shape[-1]), lower.shape)
    return solve_lower(lower, np.array(eye))


def spd_inverse(s: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Return (S⁻¹, chol(S)) from one factorization of S."""
    factor = cholesky(s)
    inv_factor = tri_inverse(factor)
    return np.swapaxes(inv_factor, -1, -2) @ inv_factor, factor


def log_diag_sum(lower: FloatArray) -> FloatArray:
    """Return Σ log Lⱼⱼ for each matrix in the stack."""
    return np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1)


def chol_diff(lower: FloatArray, ds: FloatArray) -> FloatArray:
    """Differential of the Cholesky factor: dL = L k(L⁻¹ dS L⁻ᵀ)."""
    if np.any(np.diagonal(lower, axis1=-2, axis2=-1) == 0.0):
        raise NotPositiveDefinite("singular Cholesky factor")
    left = solve_lower(lower, symmetrize(ds))
    a = np.swapaxes(solve_lower(lower, np.swapaxes(left, -1, -2)), -1, -2)
    return np.asarray(lower @ k_op(a), dtype=np.float64)


def dweight(m: FloatArray) -> FloatArray:
    """Chain-rule scaling for log-diagonal parameters: v(J) with J = diag(M) on the diagonal, ones elsewhere."""
    r = m.shape[-1]
    out = np.ones((*m.shape[:-2], half_length(r)))
    out[..., diag_positions(r)] = np.diagonal(m, axis1=-2, axis2=-1)
    return out


def from_log_diag(packed: FloatArray, r: int | None = None) -> FloatArray:
    """Lower-triangular matrix from v(M*) whose diagonal holds log Mⱼⱼ."""
    order = order_from_half(packed.shape[-1]) if r is None else r
    values = np.array(packed, dtype=np.float64, copy=True)
    pos = diag_positions(order)
    values[..., pos] = np.exp(values[..., pos])
    return unhalfvec(values, order)


def to_log_diag(m: FloatArray) -> FloatArray:
    """Return v(M*) for a lower-triangular M with positive diagonal."""
    values = halfvec(m)
    pos = diag_positions(m.shape[-1])
    values[..., pos] = np.log(values[..., pos])
    return values
