"""Reader/writer for the ``.q2nt`` matrix container.

Layout of a file::

    b"Q2NTENS1"                                   8-byte magic
    {"cols":C,"dtype":"f64","rows":R}\\n           UTF-8 JSON header line
    R*C little-endian scalars, row-major          payload

The header can be parsed without touching the payload (see :func:`read_header`).
Values are always handed out as float64 arrays; the stored dtype is kept on
the :class:`Tensor` so that saving a loaded tensor reproduces the file bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError, TruncationError

MAGIC = b"Q2NTENS1"
EXTENSION = ".q2nt"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense 2-D matrix plus the storage dtype tag ("f32" or "f64").

    ``data`` is always float64; f32 tensors hold values exactly representable
    in float32.
    """

    data: np.ndarray
    dtype: str = "f64"

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {self.dtype!r}; expected one of {sorted(_DTYPES)}")
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"Tensor needs rows >= 1 and cols >= 1, got {arr.shape}")
        # Round through the storage dtype so the in-memory value equals what is written.
        arr = np.ascontiguousarray(arr.astype(_DTYPES[self.dtype]).astype(np.float64))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.to_bytes() == other.to_bytes()
        )

    def to_bytes(self) -> bytes:
        """Payload bytes exactly as stored on disk."""
        return self.data.astype(_DTYPES[self.dtype]).tobytes(order="C")


@dataclass(frozen=True)
class LayerBundle:
    weight: Tensor
    activations: Tensor
    name: str

    def __post_init__(self):
        if self.weight.cols != self.activations.rows:
            raise DimensionError(
                f"layer {self.name!r}: weight shape {self.weight.shape} incompatible with "
                f"activation shape {self.activations.shape} (weight cols must equal activation rows)"
            )


def encode_header(dtype: str, rows: int, cols: int) -> bytes:
    return json.dumps({"dtype": dtype, "rows": rows, "cols": cols}, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    ) + b"\n"


def save_tensor(t: Tensor, path) -> None:
    path = Path(path)
    blob = MAGIC + encode_header(t.dtype, t.rows, t.cols) + t.to_bytes()
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write tensor file {path}: {exc.strerror}") from exc


def _parse_header(line: bytes, path) -> tuple[str, int, int]:
    if not line.endswith(b"\n"):
        raise FormatError(f"{path}: header line is not newline-terminated")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid UTF-8 JSON ({exc})") from exc
    if not isinstance(header, dict) or set(header) != {"dtype", "rows", "cols"}:
        raise FormatError(f"{path}: header must have exactly the keys dtype, rows, cols; got {header!r}")
    dtype, rows, cols = header["dtype"], header["rows"], header["cols"]
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    for key, val in (("rows", rows), ("cols", cols)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise FormatError(f"{path}: header field {key} must be a positive integer, got {val!r}")
    return dtype, rows, cols


def _read_magic_and_header(fh, path) -> tuple[str, int, int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    return _parse_header(fh.readline(), path)


def read_header(path) -> dict:
    """Return ``{"dtype", "rows", "cols"}`` without reading the payload."""
    with open(path, "rb") as fh:
        dtype, rows, cols = _read_magic_and_header(fh, path)
    return {"dtype": dtype, "rows": rows, "cols": cols}


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        dtype, rows, cols = _read_magic_and_header(fh, path)
        payload = fh.read()
    np_dtype = _DTYPES[dtype]
    expected = rows * cols * np_dtype.itemsize
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload is {len(payload)} bytes, header ({rows}x{cols} {dtype}) requires {expected}"
        )
    flat = np.frombuffer(payload, dtype=np_dtype)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        first = int(bad[0])
        idx = divmod(first, cols)
        raise DataError(f"{path}: non-finite value {flat[first]!r} at index {idx} (flat {first})", index=idx)
    return Tensor(flat.reshape(rows, cols), dtype)


def load_layer_bundle(directory, name: str) -> LayerBundle:
    directory = Path(directory)
    weight = load_tensor(directory / f"{name}.weight{EXTENSION}")
    acts = load_tensor(directory / f"{name}.acts{EXTENSION}")
    return LayerBundle(weight, acts, name)


def save_layer_bundle(bundle: LayerBundle, directory) -> None:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    save_tensor(bundle.weight, directory / f"{bundle.name}.weight{EXTENSION}")
    save_tensor(bundle.activations, directory / f"{bundle.name}.acts{EXTENSION}")
