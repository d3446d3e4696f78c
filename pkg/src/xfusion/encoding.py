"""Per-modality feature encoding and multi-modal embedding assembly.

Raw observation vectors pass through a frozen seeded linear stub (standing in
for a pretrained extractor) and a learned per-modality projection to produce
fixed-size token blocks. Present blocks are combined into the multi-modal
embedding, optionally with a learned positional term derived from the spatial
modality's raw vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterStore, ShapeError, Tensor, add, concat, linear, mul, reshape

__all__ = [
    "ModalityConfig",
    "EncoderStub",
    "make_stub",
    "init_modality_encoder",
    "encode_modality",
    "init_positional_encoder",
    "positional_encoding",
    "assemble_multimodal_embedding",
    "validate_modalities",
]

COMBINE_MODES = ("concat", "add")


@dataclass(frozen=True)
class ModalityConfig:
    """Static description of one synthetic sensor stream."""

    id: str
    raw_dim: int
    informative_mask: tuple[bool, ...]
    noise_sigma: float = 0.0
    p_exist: float = 0.5
    is_spatial: bool = False

    def __post_init__(self):
        if self.raw_dim < 1:
            raise ValueError(f"modality '{self.id}': raw_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError(f"modality '{self.id}': noise_sigma must be nonnegative")
        if not 0.0 <= self.p_exist <= 1.0:
            raise ValueError(f"modality '{self.id}': p_exist must be in [0, 1]")


def validate_modalities(modalities: list[ModalityConfig], latent_dim: int) -> None:
    """Check joint mask coverage and the at-most-one-spatial rule."""
    ids = [m.id for m in modalities]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate modality ids: {ids}")
    covered = np.zeros(latent_dim, dtype=bool)
    for m in modalities:
        if len(m.informative_mask) != latent_dim:
            raise ValueError(
                f"modality '{m.id}': informative_mask length {len(m.informative_mask)} != latent dim {latent_dim}"
            )
        covered |= np.asarray(m.informative_mask, dtype=bool)
    if not covered.all():
        missing = np.flatnonzero(~covered).tolist()
        raise ValueError(f"informative masks leave latent dims {missing} uncovered")
    spatial = [m.id for m in modalities if m.is_spatial]
    if len(spatial) > 1:
        raise ValueError(f"at most one spatial modality allowed, got {spatial}")


@dataclass
class EncoderStub:
    """Frozen seeded linear extractor; never receives gradients."""

    matrix: np.ndarray  # (raw_dim, n_tokens * stub_dim)
    stub_dim: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.matrix.setflags(write=False)


def make_stub(raw_dim: int, n_tokens: int, stub_dim: int, rng: np.random.Generator) -> EncoderStub:
    matrix = rng.normal(scale=1.0 / np.sqrt(raw_dim), size=(raw_dim, n_tokens * stub_dim))
    return EncoderStub(matrix=matrix, stub_dim=stub_dim)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_modality_encoder(
    store: ParameterStore, prefix: str, stub_dim: int, dim: int, rng: np.random.Generator
) -> None:
    store.add(f"{prefix}.proj.w", _uniform_fan_in(rng, stub_dim, (stub_dim, dim)))
    store.add(f"{prefix}.proj.b", np.zeros(dim))


def encode_modality(
    raw: np.ndarray | Tensor,
    stub: EncoderStub,
    store: ParameterStore,
    prefix: str,
    n_tokens: int,
) -> Tensor:
    """Map raw vectors to an (..., n_tokens, dim) feature block.

    Accepts a single vector or a batch with one leading axis.
    """
    x = raw if isinstance(raw, Tensor) else Tensor(raw)
    if x.shape[-1] != stub.matrix.shape[0]:
        raise ShapeError(f"encode_modality: raw dim {x.shape[-1]} != stub input dim {stub.matrix.shape[0]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    hidden = reshape(x @ Tensor(stub.matrix), (x.shape[0], n_tokens, stub.stub_dim))
    block = linear(hidden, store[f"{prefix}.proj.w"], store[f"{prefix}.proj.b"])
    if squeeze:
        block = reshape(block, block.shape[1:])
    return block


def init_positional_encoder(
    store: ParameterStore, prefix: str, spatial_raw_dim: int, n_tokens: int, dim: int, rng: np.random.Generator
) -> None:
    store.add(f"{prefix}.w", _uniform_fan_in(rng, spatial_raw_dim, (spatial_raw_dim, n_tokens * dim)))
    store.add(f"{prefix}.b", np.zeros(n_tokens * dim))


def positional_encoding(
    spatial_raw: np.ndarray | Tensor | None,
    store: ParameterStore,
    prefix: str,
    n_tokens: int,
    dim: int,
    enabled: bool,
) -> Tensor | None:
    """Learned positional term from the spatial modality's raw vector.

    Returns None when the gate is closed; raises if enabled without data.
    """
    if not enabled:
        return None
    if spatial_raw is None:
        raise ValueError("positional encoding enabled but the spatial modality is absent")
    x = spatial_raw if isinstance(spatial_raw, Tensor) else Tensor(spatial_raw)
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    flat = linear(x, store[f"{prefix}.w"], store[f"{prefix}.b"])
    out = reshape(flat, (x.shape[0], n_tokens, dim))
    if squeeze:
        out = reshape(out, (n_tokens, dim))
    return out


def assemble_multimodal_embedding(
    features: dict[str, Tensor],
    canonical_order: list[str],
    pos: Tensor | None,
    combine_mode: str,
) -> Tensor:
    """Combine present modality blocks in canonical order.

    concat mode stacks blocks along the token axis; add mode averages them.
    A positional term, when given, is added to every block first.
    """
    if combine_mode not in COMBINE_MODES:
        raise ValueError(f"unknown combine mode '{combine_mode}'")
    blocks = [features[mid] for mid in canonical_order if mid in features]
    if not blocks:
        raise ValueError("assemble_multimodal_embedding: empty modality set")
    if len(blocks) != len(features):
        unknown = sorted(set(features) - set(canonical_order))
        raise ValueError(f"features contain modalities outside the canonical order: {unknown}")
    if pos is not None:
        blocks = [add(b, pos) for b in blocks]
    if combine_mode == "concat":
        if len(blocks) == 1:
            return blocks[0]
        return concat(blocks, axis=-2)
    total = blocks[0]
    for b in blocks[1:]:
        total = add(total, b)
    return mul(total, 1.0 / len(blocks))
