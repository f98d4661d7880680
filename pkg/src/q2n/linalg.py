"""Dense kernels: Gram matrix, symmetric eigendecomposition, SVD reference,
orthogonal projectors.

``sym_eig`` is the fast path used by the optimizer (LAPACK divide-and-conquer
``syevd``). ``svd_oracle`` decomposes the same matrix through a general SVD
(``gesdd``) and exists for cross-checking and benchmarking only.
``jacobi_eig`` is a slow, self-contained cyclic Jacobi solver kept as a third,
library-independent reference for small matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError, NumericalError

SYMMETRY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Eigenpairs of a symmetric PSD matrix.

    ``values`` are magnitudes sorted in non-increasing order; column ``j`` of
    ``vectors`` belongs to ``values[j]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    @property
    def m(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Projector:
    matrix: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def _as_matrix(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _check_symmetric(s: np.ndarray) -> None:
    if s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s))) if s.size else 0.0)
    asym = float(np.max(np.abs(s - s.T))) if s.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise ArgumentError(f"matrix is not symmetric: max |S - S^T| = {asym:.3e}")


def gram(x) -> np.ndarray:
    """Uncentered covariance ``X @ X.T``, symmetrized to remove rounding skew."""
    x = _as_matrix(x, "X")
    g = x @ x.T
    return (g + g.T) / 2.0


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is non-negative.

    Ties go to the lowest row index (``argmax`` returns the first maximum).
    """
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.size == 0:
        return vectors
    lead = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[lead, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _package(values: np.ndarray, vectors: np.ndarray) -> EigenBasis:
    values = np.abs(values)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = fix_signs(vectors[:, order])
    values.setflags(write=False)
    vectors.setflags(write=False)
    return EigenBasis(values, vectors)


def _zero_basis(m: int) -> EigenBasis:
    return _package(np.zeros(m), np.eye(m))


def sym_eig(s) -> EigenBasis:
    """Eigendecomposition of a symmetric matrix, magnitudes sorted descending."""
    s = _as_matrix(s, "S")
    _check_symmetric(s)
    m = s.shape[0]
    if not np.all(np.isfinite(s)):
        raise NumericalError("sym_eig: input contains non-finite values")
    if not np.any(s):
        return _zero_basis(m)
    try:
        values, vectors = np.linalg.eigh(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"sym_eig: eigensolver did not converge ({exc})") from exc
    return _package(values, vectors)


def svd_oracle(s) -> EigenBasis:
    """Reference decomposition through a general SVD: left singular vectors + singular values."""
    s = _as_matrix(s, "S")
    _check_symmetric(s)
    m = s.shape[0]
    if not np.all(np.isfinite(s)):
        raise NumericalError("svd_oracle: input contains non-finite values")
    if not np.any(s):
        return _zero_basis(m)
    try:
        u, sv, _ = np.linalg.svd(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd_oracle: SVD did not converge ({exc})") from exc
    return _package(sv, u)


def jacobi_eig(s, tol: float = 1e-14, max_sweeps: int = 100) -> EigenBasis:
    """Cyclic Jacobi rotations. O(m^3) per sweep in pure numpy; use for m <= ~64."""
    a = np.array(_as_matrix(s, "S"), copy=True)
    _check_symmetric(a)
    m = a.shape[0]
    v = np.eye(m)
    total = np.linalg.norm(a)
    if total == 0.0:
        return _zero_basis(m)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * total:
            return _package(np.diag(a).copy(), v)
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
    raise NumericalError(f"jacobi_eig: no convergence after {max_sweeps} sweeps, off-diagonal norm {off:.3e}")


def projector_from_basis(u, k: int) -> Projector:
    """Orthogonal projector onto columns ``k:`` of ``u``."""
    u = _as_matrix(u, "U")
    m = u.shape[1]
    if not 0 <= k <= m:
        raise ArgumentError(f"k must lie in [0, {m}], got {k}")
    u1 = u[:, k:]
    delta = u1 @ u1.T
    delta = (delta + delta.T) / 2.0
    return Projector(delta)


def reconstruction_error(s, basis: EigenBasis) -> float:
    """Relative Frobenius residual of ``V diag(values) V^T`` against ``s``."""
    s = _as_matrix(s, "S")
    rebuilt = (basis.vectors * basis.values) @ basis.vectors.T
    denom = max(np.linalg.norm(s), np.finfo(float).tiny)
    return float(np.linalg.norm(rebuilt - s) / denom)
