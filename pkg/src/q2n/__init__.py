"""Null-space post-quantization optimizer for linear layers.

Quantize a weight matrix, approximate the null space of the calibration
activations' Gram matrix, and fold a per-channel correction into the
quantization scales.
"""

from .calibgen import SpectrumSpec, gen_activations, gen_weights
from .errors import (
    ArgumentError,
    DataError,
    DimensionError,
    FormatError,
    NumericalError,
    Q2NError,
    TruncationError,
)
from .linalg import EigenBasis, Projector, gram, projector_from_basis, svd_oracle, sym_eig
from .nullspace import (
    AlphaVector,
    NullSpaceProjection,
    RatioSelection,
    apply_alpha,
    bp_oracle,
    build_projection,
    select_rank_index,
    select_rank_nscl_style,
    select_rank_torch_style,
    solve_alpha,
)
from .pipeline import LayerReport, bench_decomposition, layer_error, run_q2n, sweep
from .quantizer import PER_ROW, QuantConfig, QuantResult, dequantize, gptq_quantize, rtn_quantize
from .tensorio import LayerBundle, Tensor, load_layer_bundle, load_tensor, save_tensor

__version__ = "0.1.0"
