"""Modality-invariant sensor fusion with a synthetic benchmark harness."""

from .encoding import EncoderStub, ModalityConfig, assemble_multimodal_embedding, encode_modality
from .fusion import FusionConfig, FusionModel, TaskSpec, VARIANTS
from .tensor import (
    NonFiniteError,
    ParameterStore,
    ShapeError,
    Tensor,
    backward,
    finite_diff_gradcheck,
)

__all__ = [
    "EncoderStub",
    "ModalityConfig",
    "assemble_multimodal_embedding",
    "encode_modality",
    "FusionConfig",
    "FusionModel",
    "TaskSpec",
    "VARIANTS",
    "NonFiniteError",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "backward",
    "finite_diff_gradcheck",
]

__version__ = "0.1.0"
