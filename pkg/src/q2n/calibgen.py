"""Deterministic synthetic weights and calibration activations.

Randomness comes from Philox4x64-10 (Random123), a counter-based generator:
stream ``s`` of seed ``x`` uses key ``(x, s)`` and counter blocks 1, 2, 3, ...
(counter word 0 incremented, four output words per block, as numpy's
``Philox`` produces them). Raw 64-bit words become uniforms via
``(word >> 11) * 2**-53`` and pairs of uniforms become standard normals via
Box-Muller, so the sequence does not depend on numpy's own sampling routines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

_TWO_M53 = 2.0**-53

# Stream identifiers keep independent draws disjoint for one seed.
STREAM_WEIGHTS = 0
STREAM_LEFT = 1
STREAM_RIGHT = 2
STREAM_NOISE = 3

KINDS = ("exact_rank", "decay", "dominant_plus_noise")


def _check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed < 2**64:
        raise ArgumentError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)


def raw_words(seed: int, stream: int, count: int) -> np.ndarray:
    """``count`` 64-bit words from Philox4x64-10 with key ``(seed, stream)``."""
    seed = _check_seed(seed)
    gen = np.random.Philox(key=seed | (int(stream) << 64))
    return gen.random_raw(count).astype(np.uint64)


def uniforms(seed: int, stream: int, count: int) -> np.ndarray:
    """Uniform doubles in [0, 1)."""
    return (raw_words(seed, stream, count) >> np.uint64(11)).astype(np.float64) * _TWO_M53


def normals(seed: int, stream: int, count: int) -> np.ndarray:
    """Standard normal doubles (Box-Muller on consecutive word pairs)."""
    pairs = (count + 1) // 2
    words = raw_words(seed, stream, 2 * pairs) >> np.uint64(11)
    u1 = (words[0::2].astype(np.float64) + 1.0) * _TWO_M53  # (0, 1]
    u2 = words[1::2].astype(np.float64) * _TWO_M53
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]


def gaussian_matrix(seed: int, stream: int, rows: int, cols: int) -> np.ndarray:
    return normals(seed, stream, rows * cols).reshape(rows, cols)


def orthonormal_columns(seed: int, stream: int, rows: int, cols: int) -> np.ndarray:
    """Haar-distributed ``rows x cols`` matrix with orthonormal columns (``cols <= rows``)."""
    q, r = np.linalg.qr(gaussian_matrix(seed, stream, rows, cols))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def gen_weights(n: int, m: int, seed: int, scale: float = 1.0) -> np.ndarray:
    if n < 1 or m < 1:
        raise ArgumentError(f"weight shape must be positive, got {n}x{m}")
    return scale * gaussian_matrix(seed, STREAM_WEIGHTS, n, m)


@dataclass(frozen=True)
class SpectrumSpec:
    """Shape of the activation spectrum to synthesize.

    ``kind``:
      * ``exact_rank``: ``rank`` singular values spread over [1, 2] (times sqrt(c)), the rest exactly 0;
      * ``decay``: singular value ``j`` is ``rate**j`` (times sqrt(c));
      * ``dominant_plus_noise``: ``k`` massive directions on top of a bulk whose
        singular values fall off like ``1/(j+1)``, plus isotropic noise of size ``noise_scale``.
    """

    m: int
    c: int
    kind: str
    seed: int = 0
    rank: int | None = None
    rate: float | None = None
    k: int = 1
    noise_scale: float = 1e-3

    def __post_init__(self):
        if self.m < 1 or self.c < 1:
            raise ArgumentError(f"m and c must be positive, got m={self.m}, c={self.c}")
        _check_seed(self.seed)
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown spectrum kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "exact_rank":
            if self.rank is None or not 0 <= self.rank <= min(self.m, self.c):
                raise ArgumentError(f"exact_rank needs 0 <= rank <= min(m, c), got {self.rank}")
        elif self.kind == "decay":
            if self.rate is None or not 0 < self.rate <= 1:
                raise ArgumentError(f"decay needs 0 < rate <= 1, got {self.rate}")
        else:
            if not 0 <= self.k <= self.m:
                raise ArgumentError(f"dominant_plus_noise needs 0 <= k <= m, got {self.k}")
            if self.noise_scale < 0:
                raise ArgumentError(f"noise_scale must be non-negative, got {self.noise_scale}")


def _low_rank(spec: SpectrumSpec, sigma: np.ndarray) -> np.ndarray:
    r = sigma.size
    if r == 0:
        return np.zeros((spec.m, spec.c))
    u = orthonormal_columns(spec.seed, STREAM_LEFT, spec.m, r)
    v = orthonormal_columns(spec.seed, STREAM_RIGHT, spec.c, r)
    return (u * sigma) @ v.T


def gen_activations(spec: SpectrumSpec) -> np.ndarray:
    """Activation matrix ``m x c`` (columns are calibration samples)."""
    m, c = spec.m, spec.c
    root_c = np.sqrt(c)
    if spec.kind == "exact_rank":
        r = spec.rank
        sigma = root_c * (2.0 - np.arange(r) / max(r - 1, 1)) if r else np.zeros(0)
        return _low_rank(spec, sigma)
    if spec.kind == "decay":
        r = min(m, c)
        return _low_rank(spec, root_c * spec.rate ** np.arange(r))
    # dominant_plus_noise
    r = min(m, c)
    k = min(spec.k, r)
    bulk = 1.0 / np.arange(1, r - k + 1)
    # The weakest massive direction carries 16x the energy of the whole bulk.
    massive = 4.0 * (np.linalg.norm(bulk) or 1.0) * np.arange(k, 0, -1)
    x = _low_rank(spec, root_c * np.concatenate([massive, bulk]))
    if spec.noise_scale:
        x = x + spec.noise_scale * gaussian_matrix(spec.seed, STREAM_NOISE, m, c)
    return x
