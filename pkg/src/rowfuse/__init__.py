"""Fused row-wise transformer kernels with exact analytic backwards.

Forward and backward passes for the norm layers, rotary embedding, gated
MLP activations, and the softmax losses are implemented as single fused
routines that cache per-row statistics instead of whole activations, write
the cross-entropy gradient into the logits buffer, and process the linear
projection head in vocab-chunks. A scalar float64 oracle, an unfused
baseline, an allocation ledger, benchmarks, and a training-parity harness
round out the package.
"""

from .core import (
    DType,
    IndexWidth,
    Matrix2D,
    NonContiguousInput,
    OddHeadDim,
    ShapeMismatch,
    SizeMismatch,
    TargetOutOfRange,
    Vector,
    check_index_width,
    flatten,
)
from .flce import ChunkPlan, ProjectionHead, flce_forward_backward, plan_chunks
from .memtrack import AllocationLedger, AllocKind, UnbalancedFree, logits_bytes, tracked
from .ops import (
    CEResult,
    GluInputs,
    NormResiduals,
    Reduction,
    RotationSpec,
    cross_entropy,
    geglu_backward,
    geglu_forward,
    layernorm_backward,
    layernorm_forward,
    rmsnorm_backward,
    rmsnorm_forward,
    rope_backward,
    rope_forward,
    rotation_thetas,
    swiglu_backward,
    swiglu_forward,
)
from .oracle import Tolerance, allclose, max_deviation

__version__ = "0.1.0"

__all__ = [
    "AllocKind",
    "AllocationLedger",
    "CEResult",
    "ChunkPlan",
    "DType",
    "GluInputs",
    "IndexWidth",
    "Matrix2D",
    "NonContiguousInput",
    "NormResiduals",
    "OddHeadDim",
    "ProjectionHead",
    "Reduction",
    "RotationSpec",
    "ShapeMismatch",
    "SizeMismatch",
    "TargetOutOfRange",
    "Tolerance",
    "UnbalancedFree",
    "Vector",
    "allclose",
    "check_index_width",
    "cross_entropy",
    "flatten",
    "flce_forward_backward",
    "geglu_backward",
    "geglu_forward",
    "layernorm_backward",
    "layernorm_forward",
    "logits_bytes",
    "max_deviation",
    "plan_chunks",
    "rmsnorm_backward",
    "rmsnorm_forward",
    "rope_backward",
    "rope_forward",
    "rotation_thetas",
    "swiglu_backward",
    "swiglu_forward",
    "tracked",
    "__version__",
]
