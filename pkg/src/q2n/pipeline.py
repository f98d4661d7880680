"""End-to-end layer optimization, error metrics, hyperparameter sweep and the
decomposition benchmark.

One layer goes through: quantize -> eigendecompose ``X X^T`` -> pick the cut
index -> build ``Delta`` -> closed-form alpha -> fold alpha into the scales.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import calibgen, linalg, nullspace, quantizer
from .errors import ArgumentError, DimensionError
from .tensorio import LayerBundle, Tensor

log = logging.getLogger(__name__)

QUANTIZERS = ("rtn", "gptq")

CSV_FIELDS = (
    "layer", "quantizer", "bits", "group", "t", "lambda", "k", "trace_delta",
    "err_baseline", "err_q2n", "rel_drop", "alpha_min", "alpha_max", "alpha_mean",
    "opt_out", "ms_eig", "ms_alpha", "ms_total",
)  # fmt: skip
TIMING_FIELDS = ("ms_eig", "ms_alpha", "ms_total")

# Hyperparameter grids: lambda scanned at t = 0.1, then t scanned at lambda = 0.2.
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
T_GRID = (0.05, 0.1, 0.15, 0.2)


@dataclass
class LayerReport:
    layer_name: str
    quantizer: str
    bits: int
    group: str
    selector: str
    t: float
    lambda_reg: float
    k: int
    trace_delta: float
    err_baseline: float
    err_q2n: float
    err_relative_drop: float
    alpha_min: float
    alpha_max: float
    alpha_mean: float
    channels_opted_out: int
    timings: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        return {
            "layer": self.layer_name,
            "quantizer": self.quantizer,
            "bits": self.bits,
            "group": self.group,
            "t": repr(self.t),
            "lambda": repr(self.lambda_reg),
            "k": self.k,
            "trace_delta": repr(self.trace_delta),
            "err_baseline": repr(self.err_baseline),
            "err_q2n": repr(self.err_q2n),
            "rel_drop": repr(self.err_relative_drop),
            "alpha_min": repr(self.alpha_min),
            "alpha_max": repr(self.alpha_max),
            "alpha_mean": repr(self.alpha_mean),
            "opt_out": self.channels_opted_out,
            "ms_eig": f"{self.timings.get('eig', 0.0):.3f}",
            "ms_alpha": f"{self.timings.get('alpha', 0.0):.3f}",
            "ms_total": f"{self.timings.get('total', 0.0):.3f}",
        }

    def to_dict(self) -> dict:
        return asdict(self)


def write_csv(reports, fh=None, header: bool = True) -> str:
    """Write reports in the fixed column order; returns the text when ``fh`` is None."""
    buf = io.StringIO() if fh is None else fh
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    if header:
        writer.writeheader()
    for rep in reports:
        writer.writerow(rep.to_row())
    return buf.getvalue() if fh is None else ""


def layer_error(w, w_other, x) -> float:
    """``||W X - W' X||_F``."""
    w = np.asarray(w, dtype=np.float64)
    w_other = np.asarray(w_other, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != w_other.shape or w.shape[1] != x.shape[0]:
        raise DimensionError(f"incompatible shapes W {w.shape}, W' {w_other.shape}, X {x.shape}")
    return float(np.linalg.norm((w - w_other) @ x))


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1e3


@dataclass(eq=False)
class PreparedLayer:
    """Quantization and eigendecomposition shared by every (t, lambda) point."""

    name: str
    w: np.ndarray
    x: np.ndarray
    qcfg: quantizer.QuantConfig
    quantizer: str
    quant: quantizer.QuantResult
    basis: linalg.EigenBasis | None
    err_baseline: float
    ms_quant: float
    ms_eig: float


def _arrays(bundle) -> tuple[str, np.ndarray, np.ndarray]:
    if isinstance(bundle, LayerBundle):
        return bundle.name, bundle.weight.data, bundle.activations.data
    name, w, x = bundle
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"weight shape {w.shape} incompatible with activation shape {x.shape}")
    return name, w, x


def prepare_layer(bundle, qcfg, quantizer_name: str = "gptq", damp: float = 0.01, decompose: bool = True):
    if quantizer_name not in QUANTIZERS:
        raise ArgumentError(f"unknown quantizer {quantizer_name!r}; expected one of {QUANTIZERS}")
    name, w, x = _arrays(bundle)
    g = linalg.gram(x)
    start = time.perf_counter()
    if quantizer_name == "gptq":
        quant = quantizer.gptq_quantize(w, x, qcfg, damp=damp, gram_matrix=g)
    else:
        quant = quantizer.rtn_quantize(w, qcfg)
    ms_quant = _ms(start)
    start = time.perf_counter()
    basis = linalg.sym_eig(g) if decompose else None
    ms_eig = _ms(start) if decompose else 0.0
    err = layer_error(w, quant.w_q, x)
    return PreparedLayer(name, w, x, qcfg, quantizer_name, quant, basis, err, ms_quant, ms_eig)


def finish_layer(
    prep: PreparedLayer,
    t: float = nullspace.DEFAULT_T,
    lambda_reg: float = nullspace.DEFAULT_LAMBDA,
    selector: str = "psr",
    excluded_top: int = nullspace.DEFAULT_EXCLUDED_TOP,
    apply_q2n: bool = True,
):
    start = time.perf_counter()
    m = prep.w.shape[1]
    if apply_q2n:
        if prep.basis is None:
            raise ArgumentError("layer was prepared without a decomposition")
        selection = nullspace.select(prep.basis.values, selector, t, excluded_top)
        if selection.k == m:
            log.info("layer %s: selector %s kept no null-space directions (Delta = 0)", prep.name, selector)
        proj = nullspace.build_projection(prep.basis, selection)
        alpha = nullspace.solve_alpha(prep.w, prep.quant.w_q, proj.delta, lambda_reg)
        result = nullspace.apply_alpha(prep.quant, alpha)
        k, trace = selection.k, proj.delta.trace
        a, opted = alpha.values, alpha.n_opted_out
        err_q2n = layer_error(prep.w, result.w_q, prep.x)
    else:
        result = prep.quant
        k, trace = m, 0.0
        a, opted = np.ones(prep.w.shape[0]), 0
        err_q2n = prep.err_baseline
    ms_alpha = _ms(start)
    base = prep.err_baseline
    drop = (base - err_q2n) / base if base > 0 else 0.0
    report = LayerReport(
        layer_name=prep.name,
        quantizer=prep.quantizer,
        bits=prep.qcfg.bits,
        group=prep.qcfg.label,
        selector=selector if apply_q2n else "none",
        t=float(t),
        lambda_reg=float(lambda_reg),
        k=int(k),
        trace_delta=float(trace),
        err_baseline=base,
        err_q2n=err_q2n,
        err_relative_drop=float(drop),
        alpha_min=float(a.min()),
        alpha_max=float(a.max()),
        alpha_mean=float(a.mean()),
        channels_opted_out=int(opted),
        timings={
            "quant": prep.ms_quant,
            "eig": prep.ms_eig,
            "alpha": ms_alpha,
            "total": prep.ms_quant + prep.ms_eig + ms_alpha,
        },
    )
    return result, report


def run_q2n(
    bundle,
    qcfg,
    t: float = nullspace.DEFAULT_T,
    lambda_reg: float = nullspace.DEFAULT_LAMBDA,
    selector: str = "psr",
    quantizer_name: str = "gptq",
    excluded_top: int = nullspace.DEFAULT_EXCLUDED_TOP,
    damp: float = 0.01,
    apply_q2n: bool = True,
):
    """Optimize one layer; returns ``(QuantResult, LayerReport)``.

    ``bundle`` is a :class:`LayerBundle` or a ``(name, W, X)`` triple.
    """
    prep = prepare_layer(bundle, qcfg, quantizer_name, damp, decompose=apply_q2n)
    return finish_layer(prep, t, lambda_reg, selector, excluded_top, apply_q2n)


def thread_cap() -> int:
    """Worker count from ``Q2N_THREADS`` (default 1)."""
    raw = os.environ.get("Q2N_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ArgumentError(f"Q2N_THREADS must be a positive integer, got {raw!r}") from None


def sweep(
    bundle,
    qcfg,
    t_grid,
    lambda_grid,
    selector: str = "psr",
    quantizer_name: str = "gptq",
    excluded_top: int = nullspace.DEFAULT_EXCLUDED_TOP,
    damp: float = 0.01,
    threads: int | None = None,
    prepared: PreparedLayer | None = None,
) -> list[LayerReport]:
    """Exhaustive grid over ``t_grid x lambda_grid``, sorted by ``err_q2n`` ascending."""
    t_grid, lambda_grid = list(t_grid), list(lambda_grid)
    if not t_grid or not lambda_grid:
        raise ArgumentError("sweep grids must be non-empty")
    prep = prepared or prepare_layer(bundle, qcfg, quantizer_name, damp)
    points = [(t, lam) for t in t_grid for lam in lambda_grid]

    def one(point):
        return finish_layer(prep, point[0], point[1], selector, excluded_top)[1]

    workers = min(threads or thread_cap(), len(points))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, points))
    else:
        reports = [one(p) for p in points]
    # Stable sort keeps grid order among ties.
    return sorted(reports, key=lambda r: r.err_q2n)


def default_sweep(bundle, qcfg, selector="psr", quantizer_name="gptq", excluded_top=1, damp=0.01, threads=None):
    """Lambda scan at t = 0.1 (9 rows) followed by a t scan at lambda = 0.2 (4 rows)."""
    prep = prepare_layer(bundle, qcfg, quantizer_name, damp)
    kw = dict(selector=selector, excluded_top=excluded_top, threads=threads, prepared=prep)
    return sweep(None, qcfg, [nullspace.DEFAULT_T], LAMBDA_GRID, **kw) + sweep(
        None, qcfg, T_GRID, [nullspace.DEFAULT_LAMBDA], **kw
    )


def bench_decomposition(sizes, seed: int = 0, repeats: int = 1) -> list[dict]:
    """Time ``sym_eig`` against ``svd_oracle`` on random PSD matrices.

    Runs sequentially so the two timings do not compete for cores.
    """
    rows = []
    for m in sizes:
        if m < 2:
            raise ArgumentError(f"bench sizes must be >= 2, got {m}")
        a = calibgen.gaussian_matrix(seed, calibgen.STREAM_WEIGHTS, m, m)
        s = linalg.gram(a) / m
        best_eig = best_svd = np.inf
        for _ in range(repeats):
            start = time.perf_counter()
            eig = linalg.sym_eig(s)
            best_eig = min(best_eig, _ms(start))
            start = time.perf_counter()
            ref = linalg.svd_oracle(s)
            best_svd = min(best_svd, _ms(start))
        scale = max(float(ref.values[0]), np.finfo(float).tiny)
        rows.append(
            {
                "m": int(m),
                "ms_eig": best_eig,
                "ms_svd": best_svd,
                "speedup": best_svd / best_eig if best_eig > 0 else float("inf"),
                "max_value_discrepancy": float(np.max(np.abs(eig.values - ref.values)) / scale),
            }
        )
    return rows


def compare_bp(
    w,
    wq,
    delta,
    lambda_reg: float = nullspace.DEFAULT_LAMBDA,
    epochs_grid=nullspace.BP_EPOCHS,
    lr_grid=nullspace.BP_LEARNING_RATES,
) -> list[dict]:
    """Objective of the closed form versus gradient descent for each (epochs, lr) cell."""
    closed = nullspace.solve_alpha(w, wq, delta, lambda_reg)
    f_closed = nullspace.objective(w, wq, delta, closed, lambda_reg)
    f_unit = nullspace.objective(w, wq, delta, np.ones(np.shape(w)[0]), lambda_reg)
    rows = []
    for epochs in epochs_grid:
        for lr in lr_grid:
            bp = nullspace.bp_oracle(w, wq, delta, lambda_reg, epochs, lr)
            f_bp = nullspace.objective(w, wq, delta, bp, lambda_reg)
            rows.append(
                {
                    "epochs": int(epochs),
                    "lr": float(lr),
                    "objective_bp": f_bp,
                    "objective_closed": f_closed,
                    "objective_unit": f_unit,
                    "gap": f_bp - f_closed,
                    "diverged": bp.diverged,
                }
            )
    return rows


def bp_fixture(seed: int = 9, n: int = 6, m: int = 8, bits: int = 2):
    """Small ``(W, Wq, Delta)`` instance: Gaussian W, RTN per-row Wq, projector
    onto the trailing half of a random orthonormal basis."""
    w = calibgen.gen_weights(n, m, seed)
    wq = quantizer.rtn_quantize(w, quantizer.QuantConfig(bits, quantizer.PER_ROW)).w_q
    u = calibgen.orthonormal_columns(seed, calibgen.STREAM_LEFT, m, m)
    return w, wq, linalg.projector_from_basis(u, m // 2)
