"""Weight-only fake quantization: asymmetric min-max RTN and a GPTQ-style
column-sequential variant with Hessian-based error compensation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError, DimensionError, NumericalError

PER_ROW = "per-row"


@dataclass(frozen=True)
class QuantConfig:
    """``group_size`` is a positive int dividing the column count, or ``"per-row"``."""

    bits: int = 2
    group_size: int | str = 128
    scheme: str = "asymmetric"

    def __post_init__(self):
        if isinstance(self.bits, bool) or not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise ArgumentError(f"bits must be an integer in [2, 8], got {self.bits!r}")
        if self.group_size != PER_ROW:
            if isinstance(self.group_size, bool) or not isinstance(self.group_size, (int, np.integer)):
                raise ArgumentError(f"group_size must be a positive integer or {PER_ROW!r}, got {self.group_size!r}")
            if self.group_size < 1:
                raise ArgumentError(f"group_size must be positive, got {self.group_size}")
        if self.scheme != "asymmetric":
            raise ArgumentError(f"only the asymmetric scheme is supported, got {self.scheme!r}")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def group_width(self, cols: int) -> int:
        if self.group_size == PER_ROW:
            return cols
        if cols % self.group_size:
            raise ArgumentError(f"group_size {self.group_size} does not divide column count {cols}")
        return int(self.group_size)

    @property
    def label(self) -> str:
        return "row" if self.group_size == PER_ROW else str(self.group_size)


def default_config(bits: int, cols: int) -> QuantConfig:
    """2-bit uses groups of 128 when the width allows it; everything else is per-row."""
    if bits == 2 and cols % 128 == 0:
        return QuantConfig(bits, 128)
    return QuantConfig(bits, PER_ROW)


@dataclass(frozen=True, eq=False)
class QuantResult:
    """Fake-quantized weights with the grid that produced them.

    ``scales`` and ``zeros`` have shape ``(rows, n_groups)``. ``w_q`` always
    equals ``scales[:, g] * (codes - zeros[:, g])`` with ``g`` the column's group.
    """

    w_q: np.ndarray
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    bits: int
    group_width: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_q.shape

    def group_index(self) -> np.ndarray:
        return np.arange(self.w_q.shape[1]) // self.group_width


def reconstruct(codes, scales, zeros, group_width: int) -> np.ndarray:
    g = np.arange(codes.shape[1]) // group_width
    return scales[:, g] * (codes - zeros[:, g])


def make_result(codes, scales, zeros, bits: int, group_width: int) -> QuantResult:
    codes = np.asarray(codes, dtype=np.int64)
    scales = np.asarray(scales, dtype=np.float64)
    zeros = np.asarray(zeros, dtype=np.float64)
    w_q = reconstruct(codes, scales, zeros, group_width)
    for arr in (w_q, codes, scales, zeros):
        arr.setflags(write=False)
    return QuantResult(w_q, codes, scales, zeros, bits, group_width)


def grid_params(w: np.ndarray, qmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Scale and zero-point per row of ``w`` (shape ``(rows, width)``).

    Constant rows get an exact grid: value ``v`` is stored as ``|v| * (1 - 0)``
    or ``|v| * (0 - 1)``; ``v == 0`` uses scale 1 with code = zero = 0.
    """
    lo = w.min(axis=1)
    hi = w.max(axis=1)
    flat = hi == lo
    span = np.where(flat, 1.0, hi - lo)
    scale = span / qmax
    zero = np.clip(np.round(-lo / scale), 0, qmax)
    if np.any(flat):
        v = lo[flat]
        scale[flat] = np.where(v == 0, 1.0, np.abs(v))
        zero[flat] = np.where(v < 0, 1.0, 0.0)
    return scale, zero


def quantize_values(w: np.ndarray, scale: np.ndarray, zero: np.ndarray, qmax: int) -> np.ndarray:
    """Integer codes ``clamp(round(w / s) + z, 0, qmax)``; ``np.round`` is half-to-even."""
    codes = np.clip(np.round(w / scale[:, None]) + zero[:, None], 0, qmax)
    return codes.astype(np.int64)


def _check_weight(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ArgumentError("weight contains non-finite values")
    return w


def rtn_quantize(w, cfg: QuantConfig) -> QuantResult:
    w = _check_weight(w)
    n, m = w.shape
    width = cfg.group_width(m)
    n_groups = m // width
    codes = np.empty((n, m), dtype=np.int64)
    scales = np.empty((n, n_groups))
    zeros = np.empty((n, n_groups))
    for g in range(n_groups):
        cols = slice(g * width, (g + 1) * width)
        block = w[:, cols]
        s, z = grid_params(block, cfg.qmax)
        codes[:, cols] = quantize_values(block, s, z, cfg.qmax)
        scales[:, g] = s
        zeros[:, g] = z
    return make_result(codes, scales, zeros, cfg.bits, width)


def gptq_quantize(w, x, cfg: QuantConfig, damp: float = 0.01, gram_matrix=None) -> QuantResult:
    """Quantize columns left to right, pushing each column's rounding error onto
    the not-yet-quantized columns through the upper Cholesky factor of the
    inverse damped Hessian ``H = X X^T + damp * mean(diag(X X^T)) * I``.

    Group grids are fitted on the compensated weights when the loop reaches the
    group's first column. ``gram_matrix`` lets callers reuse a precomputed ``X X^T``.
    """
    w = _check_weight(w)
    n, m = w.shape
    if not 0 < damp <= 1:
        raise ArgumentError(f"damp must lie in (0, 1], got {damp}")
    if gram_matrix is None:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != m:
            raise DimensionError(f"activations shape {x.shape} incompatible with weight shape {w.shape}")
        h = x @ x.T
    else:
        h = np.asarray(gram_matrix, dtype=np.float64)
        if h.shape != (m, m):
            raise DimensionError(f"gram matrix shape {h.shape} incompatible with weight shape {w.shape}")
    h = (h + h.T) / 2.0
    mean_diag = float(np.mean(np.diag(h)))
    if not np.isfinite(mean_diag) or mean_diag <= 0:
        raise NumericalError(f"Hessian is not invertible after damping (mean diagonal {mean_diag})")
    h = h + damp * mean_diag * np.eye(m)
    try:
        hinv = np.linalg.inv(h)
        hinv_u = np.linalg.cholesky((hinv + hinv.T) / 2.0).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Hessian is not invertible after damping ({exc})") from exc

    width = cfg.group_width(m)
    n_groups = m // width
    work = w.copy()
    codes = np.empty((n, m), dtype=np.int64)
    scales = np.empty((n, n_groups))
    zeros = np.empty((n, n_groups))
    s = z = None
    for j in range(m):
        if j % width == 0:
            g = j // width
            s, z = grid_params(work[:, j : j + width], cfg.qmax)
            scales[:, g] = s
            zeros[:, g] = z
        col = work[:, j : j + 1]
        q = quantize_values(col, s, z, cfg.qmax)
        codes[:, j] = q[:, 0]
        deq = s * (q[:, 0] - z)
        d = hinv_u[j, j]
        err = (work[:, j] - deq) / d
        work[:, j + 1 :] -= np.outer(err, hinv_u[j, j + 1 :])
    return make_result(codes, scales, zeros, cfg.bits, width)


def dequantize(q: QuantResult) -> np.ndarray:
    return q.w_q


def with_scales(q: QuantResult, scales) -> QuantResult:
    scales = np.asarray(scales, dtype=np.float64)
    w_q = reconstruct(q.codes, scales, q.zeros, q.group_width)
    scales.setflags(write=False)
    w_q.setflags(write=False)
    return replace(q, w_q=w_q, scales=scales)
