"""Dense real tensor algebra used by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  The helpers
here add shape validation and deterministic sign conventions on top of
numpy/LAPACK so that factorizations (and therefore serialized models) are
reproducible bit for bit.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import NumericalConsistencyError, PreconditionError, ShapeError

__all__ = [
    "SvdResult",
    "as_tensor",
    "contract",
    "svd",
    "batched_svd",
    "complete_orthonormal",
    "kron",
    "qr_positive",
    "orthogonality_error",
]


class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN and infinities."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalConsistencyError(f"{name} contains non-finite entries")
    return arr


def _require_rank2(m: np.ndarray, name: str) -> None:
    if m.ndim != 2:
        raise ShapeError(f"{name} must be rank-2, got shape {m.shape}")


def contract(a, b, axes_a: Sequence[int], axes_b: Sequence[int]) -> np.ndarray:
    """Sum over paired axes of ``a`` and ``b``.

    The result carries the free axes of ``a`` followed by the free axes of
    ``b``, in their original order.
    """
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    axes_a = [int(i) for i in axes_a]
    axes_b = [int(i) for i in axes_b]
    if len(axes_a) != len(axes_b):
        raise ShapeError(
            f"axis lists differ in length: {len(axes_a)} vs {len(axes_b)}"
        )
    for ia, ib in zip(axes_a, axes_b):
        if not (-a.ndim <= ia < a.ndim) or not (-b.ndim <= ib < b.ndim):
            raise ShapeError(f"axis pair (a:{ia}, b:{ib}) out of range")
        if a.shape[ia] != b.shape[ib]:
            raise ShapeError(
                f"cannot contract a axis {ia} (dim {a.shape[ia]}) "
                f"with b axis {ib} (dim {b.shape[ib]})"
            )
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def _fix_svd_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of every left singular vector made positive
    idx = np.argmax(np.abs(u), axis=-2)
    pick = np.take_along_axis(u, idx[..., None, :], axis=-2)[..., 0, :]
    sign = np.where(pick < 0, -1.0, 1.0)
    return u * sign[..., None, :], vt * sign[..., :, None]


def batched_svd(m: np.ndarray) -> SvdResult:
    """Thin SVD of a stack of matrices ``(..., rows, cols)``."""
    m = as_tensor(m, "matrix")
    if m.ndim < 2:
        raise ShapeError(f"expected at least rank-2 input, got shape {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, vt = _fix_svd_signs(u, vt)
    return SvdResult(u, s, vt)


def svd(m) -> SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with descending ``s``."""
    m = as_tensor(m, "matrix")
    _require_rank2(m, "svd input")
    return batched_svd(m)


def orthogonality_error(q: np.ndarray) -> float:
    """Frobenius norm of ``q.T @ q - I``."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.linalg.norm(q.T @ q - np.eye(q.shape[1])))


def complete_orthonormal(v, tol: float = 1e-8) -> np.ndarray:
    """Extend ``r`` orthonormal rows to an ``n x n`` orthogonal matrix.

    The first ``r`` rows of the result are ``v`` itself (bit-identical); the
    remaining rows span the orthogonal complement and are sign-fixed so that
    their largest-magnitude entry is positive.
    """
    v = as_tensor(v, "v")
    if v.ndim == 1:
        v = v[None, :]
    _require_rank2(v, "v")
    r, n = v.shape
    if r > n:
        raise ShapeError(f"cannot complete {r} rows in dimension {n}")
    dev = float(np.linalg.norm(v @ v.T - np.eye(r)))
    if dev > tol:
        raise PreconditionError(
            f"rows are not orthonormal: ||v v^T - I||_F = {dev:.3e} > {tol:g}"
        )
    q = np.empty((n, n))
    q[:r] = v
    if r < n:
        basis, _ = np.linalg.qr(v.T, mode="complete")
        comp = basis[:, r:].T
        idx = np.argmax(np.abs(comp), axis=1)
        sign = np.where(comp[np.arange(n - r), idx] < 0, -1.0, 1.0)
        q[r:] = comp * sign[:, None]
    return q


def kron(a, b) -> np.ndarray:
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    _require_rank2(a, "a")
    _require_rank2(b, "b")
    return np.kron(a, b)


def qr_positive(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR factorization with a non-negative diagonal in ``R``.

    This is the convention under which ``qr_positive(q)[0] == q`` for an
    orthogonal ``q`` and under which the Q factor of a Gaussian matrix is
    Haar distributed.
    """
    q, r = np.linalg.qr(a)
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1)).copy()
    d[d == 0] = 1.0
    return q * d[..., None, :], r * d[..., :, None]
