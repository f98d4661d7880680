"""Null-space approximation and the per-channel correction vector.

Pipeline pieces, in order of use:

* rank selectors turn a descending spectrum into a cut index ``k``; the
  columns ``k:`` of the eigenbasis span the approximate null space;
* :func:`build_projection` forms ``Delta = U1 U1^T`` from those columns;
* :func:`solve_alpha` fits one scalar per output channel so that
  ``alpha * Wq`` mimics ``W - (W - Wq) Delta`` under a pull toward 1;
* :func:`apply_alpha` folds the scalars into the quantization scales.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, NumericalError
from .linalg import EigenBasis, Projector, projector_from_basis
from .quantizer import QuantResult, with_scales

log = logging.getLogger(__name__)

DEFAULT_T = 0.1
DEFAULT_LAMBDA = 0.2
DEFAULT_EXCLUDED_TOP = 1
DEFAULT_NSCL_FACTOR = 50.0

# Gradient-descent presets compared against the closed form (epochs x learning rate).
BP_EPOCHS = (20, 50, 100)
BP_LEARNING_RATES = (5e-4, 1e-3, 2e-3)


@dataclass(frozen=True)
class RatioSelection:
    """Cut index ``k`` in the full (0-based column) index space plus how it was chosen."""

    k: int
    ratio_at_k: float
    excluded_top: int
    threshold_t: float
    method: str = "psr"


@dataclass(frozen=True, eq=False)
class AlphaVector:
    values: np.ndarray
    lambda_reg: float
    opted_out: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    diverged: bool = False

    @property
    def n_opted_out(self) -> int:
        return int(np.count_nonzero(self.opted_out))


@dataclass(frozen=True, eq=False)
class NullSpaceProjection:
    selection: RatioSelection
    delta: Projector


def _values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ArgumentError(f"expected a non-empty 1-D spectrum, got shape {v.shape}")
    return v


def select_rank_index(values, t: float = DEFAULT_T, excluded_top: int = DEFAULT_EXCLUDED_TOP) -> RatioSelection:
    """Smallest ``k`` whose suffix/prefix eigenvalue-sum ratio is ``<= t``.

    The first ``excluded_top`` values are dropped from both sums, so the search
    starts at ``k = excluded_top + 1``. An all-zero prefix never qualifies; if
    nothing qualifies the result is ``k = m`` (empty null-space basis).
    """
    v = _values(values)
    m = v.size
    if not t > 0:
        raise ArgumentError(f"threshold t must be positive, got {t}")
    if not 0 <= excluded_top < m:
        raise ArgumentError(f"excluded_top must lie in [0, {m - 1}], got {excluded_top}")
    tail = v[excluded_top:]
    prefix = np.cumsum(tail)  # prefix[j] = sum of tail[:j + 1]
    suffix = np.append(np.cumsum(tail[::-1])[::-1][1:], 0.0)  # sum of tail[j + 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(prefix > 0, suffix / prefix, np.inf)
    ok = np.flatnonzero(ratio <= t)
    if ok.size == 0:
        return RatioSelection(m, float("inf"), excluded_top, float(t))
    j = int(ok[0])
    return RatioSelection(excluded_top + j + 1, float(ratio[j]), excluded_top, float(t))


def select_rank_torch_style(values, rel_cutoff: float | None = None) -> RatioSelection:
    """Numerical-rank cut: ``k`` = number of values above ``rel_cutoff * max``."""
    v = _values(values)
    if rel_cutoff is None:
        rel_cutoff = v.size * np.finfo(np.float64).eps
    k = int(np.count_nonzero(v > rel_cutoff * v.max()))
    return RatioSelection(k, float(rel_cutoff), 0, float(rel_cutoff), method="torch")


def select_rank_nscl_style(values, factor: float = DEFAULT_NSCL_FACTOR) -> RatioSelection:
    """Keep values more than ``factor`` times the smallest one; ``k >= 1`` always."""
    v = _values(values)
    smallest = v.min()
    if smallest <= 0:
        sel = select_rank_torch_style(v)
        k = sel.k
    else:
        k = int(np.count_nonzero(v > factor * smallest))
    k = max(k, 1)
    return RatioSelection(k, float(factor), 0, float(factor), method="nscl")


SELECTORS = ("psr", "torch", "nscl")


def select(values, selector: str = "psr", t: float = DEFAULT_T, excluded_top: int = DEFAULT_EXCLUDED_TOP):
    if selector == "psr":
        return select_rank_index(values, t, excluded_top)
    if selector == "torch":
        return select_rank_torch_style(values)
    if selector == "nscl":
        return select_rank_nscl_style(values)
    raise ArgumentError(f"unknown selector {selector!r}; expected one of {SELECTORS}")


def build_projection(basis: EigenBasis, selection: RatioSelection) -> NullSpaceProjection:
    if not 0 <= selection.k <= basis.m:
        raise ArgumentError(f"selection k={selection.k} outside [0, {basis.m}]")
    return NullSpaceProjection(selection, projector_from_basis(basis.vectors, selection.k))


def _check_pair(w, wq, delta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=np.float64)
    wq = np.asarray(wq, dtype=np.float64)
    d = np.asarray(delta.matrix if isinstance(delta, Projector) else delta, dtype=np.float64)
    if w.ndim != 2 or w.shape != wq.shape:
        raise DimensionError(f"W {w.shape} and Wq {wq.shape} must be 2-D and equal in shape")
    if d.shape != (w.shape[1], w.shape[1]):
        raise DimensionError(f"projector shape {d.shape} does not match weight width {w.shape[1]}")
    return w, wq, d


def target_weights(w, wq, delta) -> np.ndarray:
    """``H = W - (W - Wq) Delta``: full-precision weights with the null-space
    part of the quantization error removed."""
    w, wq, d = _check_pair(w, wq, delta)
    with np.errstate(invalid="ignore", over="ignore"):  # callers check finiteness
        return w - (w - wq) @ d


def objective(w, wq, delta, alpha, lambda_reg: float) -> float:
    """``||(W - Wq) Delta - (W - alpha * Wq)||_F^2 + lambda * ||alpha - 1||^2``, alpha per row."""
    w, wq, d = _check_pair(w, wq, delta)
    a = np.asarray(alpha.values if isinstance(alpha, AlphaVector) else alpha, dtype=np.float64)
    resid = (w - wq) @ d - (w - a[:, None] * wq)
    return float(np.sum(resid * resid) + lambda_reg * np.sum((a - 1.0) ** 2))


def solve_alpha(w, wq, delta, lambda_reg: float = DEFAULT_LAMBDA) -> AlphaVector:
    """Closed-form minimizer of :func:`objective`, row by row.

    Channels whose solution is ``<= 0`` keep ``alpha = 1`` and are flagged in
    ``opted_out``; a non-positive factor would flip the channel's scales.
    """
    if not lambda_reg > 0:
        raise ArgumentError(f"lambda_reg must be positive, got {lambda_reg}")
    w, wq, d = _check_pair(w, wq, delta)
    h = target_weights(w, wq, d)
    if not np.all(np.isfinite(h)):
        raise NumericalError("target weights H contain non-finite values")
    num = np.einsum("ij,ij->i", wq, h) + lambda_reg
    den = np.einsum("ij,ij->i", wq, wq) + lambda_reg
    alpha = num / den
    if not np.all(np.isfinite(alpha)):
        raise NumericalError("alpha contains non-finite values")
    opted_out = alpha <= 0
    if np.any(opted_out):
        log.warning("%d channel(s) produced alpha <= 0 and keep alpha = 1", int(opted_out.sum()))
        alpha = np.where(opted_out, 1.0, alpha)
    return AlphaVector(alpha, float(lambda_reg), opted_out)


def bp_oracle(w, wq, delta, lambda_reg: float = DEFAULT_LAMBDA, epochs: int = 100, lr: float = 1e-3) -> AlphaVector:
    """Plain gradient descent on :func:`objective`, starting from alpha = 1.

    The gradient is taken from the residual directly; it does not reuse the
    closed form. Ten consecutive increases of the objective mark the run as
    diverged (the iterate is still returned).
    """
    if isinstance(epochs, bool) or not isinstance(epochs, (int, np.integer)) or epochs < 1:
        raise ArgumentError(f"epochs must be a positive integer, got {epochs!r}")
    if not lr > 0:
        raise ArgumentError(f"learning rate must be positive, got {lr}")
    w, wq, d = _check_pair(w, wq, delta)
    target = (w - wq) @ d - w
    alpha = np.ones(w.shape[0])
    prev = objective(w, wq, d, alpha, lambda_reg)
    rising = 0
    diverged = False
    for _ in range(int(epochs)):
        resid = target + alpha[:, None] * wq
        grad = 2.0 * np.einsum("ij,ij->i", resid, wq) + 2.0 * lambda_reg * (alpha - 1.0)
        alpha = alpha - lr * grad
        cur = objective(w, wq, d, alpha, lambda_reg)
        rising = rising + 1 if cur > prev else 0
        prev = cur
        if rising >= 10 or not np.isfinite(cur):
            diverged = True
            log.warning("bp_oracle diverged (lr=%g, objective %.3e)", lr, cur)
            break
    return AlphaVector(alpha, float(lambda_reg), np.zeros(w.shape[0], dtype=bool), diverged)


def apply_alpha(q: QuantResult, alpha: AlphaVector) -> QuantResult:
    """Scale every group scale of row ``i`` by ``alpha[i]``; codes and zeros are untouched."""
    a = np.asarray(alpha.values if isinstance(alpha, AlphaVector) else alpha, dtype=np.float64)
    if a.shape != (q.shape[0],):
        raise DimensionError(f"alpha has shape {a.shape}, expected ({q.shape[0]},)")
    bad = np.flatnonzero(~(a > 0) | ~np.isfinite(a))
    if bad.size:
        raise NumericalError(f"alpha must be positive and finite; offending channels {bad[:10].tolist()}")
    return with_scales(q, q.scales * a[:, None])
