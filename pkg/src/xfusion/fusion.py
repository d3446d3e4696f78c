"""Cross-modal fusion blocks, architecture variants, and task heads.

The fusion pipeline: per-modality key/value generators preserve
modality-specific detail, a shared cross-modal transformer compresses the
variable-size multi-modal embedding to a fixed token count, and per-modality
cross-attention re-injects each modality's information into that unified
embedding. The driver either iterates one block or stacks independent ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import (
    ModalityConfig,
    assemble_multimodal_embedding,
    encode_modality,
    init_modality_encoder,
    init_positional_encoder,
    make_stub,
    positional_encoding,
)
from .tensor import (
    ParameterStore,
    Tensor,
    adaptive_avg_pool,
    add,
    concat,
    dropout,
    layer_norm,
    linear,
    mean,
    multi_head_attention,
    relu,
    reshape,
)

__all__ = [
    "VARIANTS",
    "FusionConfig",
    "TaskSpec",
    "FusionModel",
    "generate_kv",
    "cross_modal_forward",
    "cross_attention_inject",
    "task_head_forward",
    "init_kv_generator",
    "init_cross_modal",
    "init_cross_attention",
    "init_self_attention",
    "init_task_head",
]

VARIANTS = (
    "iterative-shared-block",
    "stacked-fresh-kv",
    "stacked-shared-kv",
    "transformer-only",
)


@dataclass(frozen=True)
class FusionConfig:
    """Architecture hyperparameters shared by all variants."""

    tokens_per_modality: int
    feature_dim: int
    heads: int
    scale: float
    iterations: int
    ffn_hidden: int
    variant: str = "iterative-shared-block"
    post_norm: bool = True
    dropout_rate: float = 0.0
    positional_encoding: bool = True
    combine_mode: str = "concat"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.feature_dim % self.heads != 0:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by heads {self.heads}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}', expected one of {VARIANTS}")
        if self.combine_mode not in ("concat", "add"):
            raise ValueError(f"unknown combine_mode '{self.combine_mode}'")


@dataclass(frozen=True)
class TaskSpec:
    """Downstream task: 3D keypoint regression or activity classification."""

    kind: str  # "hpe" | "har"
    joints: int = 0
    num_classes: int = 0

    def __post_init__(self):
        if self.kind not in ("hpe", "har"):
            raise ValueError(f"unknown task '{self.kind}'")
        if self.kind == "hpe" and self.joints < 3:
            raise ValueError(f"hpe requires at least 3 joints, got {self.joints}")
        if self.kind == "har" and self.num_classes < 2:
            raise ValueError(f"har requires at least 2 classes, got {self.num_classes}")

    @property
    def output_dim(self) -> int:
        return 3 * self.joints if self.kind == "hpe" else self.num_classes


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(store: ParameterStore, prefix: str, d_in: int, d_out: int, rng) -> None:
    store.add(f"{prefix}.w", _uniform_fan_in(rng, d_in, (d_in, d_out)))
    store.add(f"{prefix}.b", np.zeros(d_out))


def _add_norm(store: ParameterStore, prefix: str, d: int) -> None:
    store.add(f"{prefix}.gamma", np.ones(d))
    store.add(f"{prefix}.beta", np.zeros(d))


def _add_ffn(store: ParameterStore, prefix: str, d: int, hidden: int, rng) -> None:
    _add_linear(store, f"{prefix}.ffn1", d, hidden, rng)
    _add_linear(store, f"{prefix}.ffn2", hidden, d, rng)


def _add_attn_out(store: ParameterStore, prefix: str, d: int, rng, identity: bool) -> None:
    values = np.eye(d) if identity else _uniform_fan_in(rng, d, (d, d))
    store.add(f"{prefix}.out", values)


def init_kv_generator(store: ParameterStore, prefix: str, cfg: FusionConfig, rng) -> None:
    d = cfg.feature_dim
    _add_linear(store, f"{prefix}.mlp1", d, 2 * d, rng)
    _add_norm(store, f"{prefix}.ln", 2 * d)
    _add_linear(store, f"{prefix}.mlp2", 2 * d, d, rng)
    _add_linear(store, f"{prefix}.key", d, d, rng)
    _add_linear(store, f"{prefix}.value", d, d, rng)


def init_cross_modal(store: ParameterStore, prefix: str, cfg: FusionConfig, rng, identity_out=False) -> None:
    d = cfg.feature_dim
    for name in ("q", "k", "v"):
        _add_linear(store, f"{prefix}.{name}", d, d, rng)
    _add_attn_out(store, prefix, d, rng, identity_out)
    _add_ffn(store, prefix, d, cfg.ffn_hidden, rng)
    if cfg.post_norm:
        _add_norm(store, f"{prefix}.ln1", d)
        _add_norm(store, f"{prefix}.ln2", d)


def init_cross_attention(store: ParameterStore, prefix: str, cfg: FusionConfig, rng, identity_out=False) -> None:
    d = cfg.feature_dim
    _add_linear(store, f"{prefix}.q", d, d, rng)
    _add_attn_out(store, prefix, d, rng, identity_out)
    _add_ffn(store, prefix, d, cfg.ffn_hidden, rng)
    if cfg.post_norm:
        _add_norm(store, f"{prefix}.ln1", d)
        _add_norm(store, f"{prefix}.ln2", d)


def init_self_attention(store: ParameterStore, prefix: str, cfg: FusionConfig, rng, identity_out=False) -> None:
    init_cross_modal(store, prefix, cfg, rng, identity_out)


def init_task_head(store: ParameterStore, prefix: str, cfg: FusionConfig, task: TaskSpec, rng) -> None:
    _add_linear(store, f"{prefix}.fc1", cfg.feature_dim, cfg.ffn_hidden, rng)
    _add_linear(store, f"{prefix}.fc2", cfg.ffn_hidden, task.output_dim, rng)


class _Dropout:
    """Applies dropout only on the training path; inert otherwise."""

    def __init__(self, rate: float, rng: np.random.Generator | None, training: bool):
        self.active = training and rate > 0.0
        if self.active and rng is None:
            raise ValueError("training with dropout requires an RNG")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.rng) if self.active else x


def generate_kv(block: Tensor, store: ParameterStore, prefix: str, cfg: FusionConfig) -> tuple[Tensor, Tensor]:
    """Modality key/value pair via a 2-layer MLP with ReLU + layer norm between."""
    h = linear(block, store[f"{prefix}.mlp1.w"], store[f"{prefix}.mlp1.b"])
    h = layer_norm(relu(h), store[f"{prefix}.ln.gamma"], store[f"{prefix}.ln.beta"], cfg.layer_norm_eps)
    h = linear(h, store[f"{prefix}.mlp2.w"], store[f"{prefix}.mlp2.b"])
    k = linear(h, store[f"{prefix}.key.w"], store[f"{prefix}.key.b"])
    v = linear(h, store[f"{prefix}.value.w"], store[f"{prefix}.value.b"])
    return k, v


def _ffn(x: Tensor, store: ParameterStore, prefix: str, drop: _Dropout) -> Tensor:
    h = relu(linear(x, store[f"{prefix}.ffn1.w"], store[f"{prefix}.ffn1.b"]))
    return drop(linear(h, store[f"{prefix}.ffn2.w"], store[f"{prefix}.ffn2.b"]))


def _maybe_norm(x: Tensor, store: ParameterStore, name: str, cfg: FusionConfig) -> Tensor:
    if not cfg.post_norm:
        return x
    return layer_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"], cfg.layer_norm_eps)


def cross_modal_forward(
    emb_mm: Tensor,
    store: ParameterStore,
    prefix: str,
    cfg: FusionConfig,
    drop: _Dropout | None = None,
) -> Tensor:
    """Compress the multi-modal embedding to a fixed-size cross-modal one.

    Attention output and the input are both adaptively pooled to the
    per-modality token count before the residual sum; a feed-forward
    residual follows.
    """
    n = cfg.tokens_per_modality
    if emb_mm.shape[-2] % n != 0 or emb_mm.shape[-2] == 0:
        raise ValueError(f"cross_modal_forward: token count {emb_mm.shape[-2]} is not a positive multiple of {n}")
    drop = drop or _Dropout(0.0, None, False)
    q = linear(emb_mm, store[f"{prefix}.q.w"], store[f"{prefix}.q.b"])
    k = linear(emb_mm, store[f"{prefix}.k.w"], store[f"{prefix}.k.b"])
    v = linear(emb_mm, store[f"{prefix}.v.w"], store[f"{prefix}.v.b"])
    attn = drop(multi_head_attention(q, k, v, cfg.heads, cfg.scale, store[f"{prefix}.out"]))
    z = add(adaptive_avg_pool(attn, n), adaptive_avg_pool(emb_mm, n))
    z = _maybe_norm(z, store, f"{prefix}.ln1", cfg)
    out = add(_ffn(z, store, prefix, drop), z)
    return _maybe_norm(out, store, f"{prefix}.ln2", cfg)


def cross_attention_inject(
    emb_cm: Tensor,
    k: Tensor,
    v: Tensor,
    store: ParameterStore,
    prefix: str,
    cfg: FusionConfig,
    drop: _Dropout | None = None,
) -> Tensor:
    """Inject one modality's key/value pair into the cross-modal embedding."""
    drop = drop or _Dropout(0.0, None, False)
    q = linear(emb_cm, store[f"{prefix}.q.w"], store[f"{prefix}.q.b"])
    o = drop(multi_head_attention(q, k, v, cfg.heads, cfg.scale, store[f"{prefix}.out"]))
    o = _maybe_norm(add(o, emb_cm), store, f"{prefix}.ln1", cfg)
    out = add(_ffn(o, store, prefix, drop), o)
    return _maybe_norm(out, store, f"{prefix}.ln2", cfg)


def _self_attention_block(x: Tensor, store: ParameterStore, prefix: str, cfg: FusionConfig, drop: _Dropout) -> Tensor:
    q = linear(x, store[f"{prefix}.q.w"], store[f"{prefix}.q.b"])
    k = linear(x, store[f"{prefix}.k.w"], store[f"{prefix}.k.b"])
    v = linear(x, store[f"{prefix}.v.w"], store[f"{prefix}.v.b"])
    a = drop(multi_head_attention(q, k, v, cfg.heads, cfg.scale, store[f"{prefix}.out"]))
    h = _maybe_norm(add(a, x), store, f"{prefix}.ln1", cfg)
    out = add(_ffn(h, store, prefix, drop), h)
    return _maybe_norm(out, store, f"{prefix}.ln2", cfg)


def task_head_forward(emb_cm: Tensor, store: ParameterStore, prefix: str, task: TaskSpec) -> Tensor:
    """Token-mean pooling followed by a two-layer MLP into the task space."""
    pooled = mean(emb_cm, axis=-2)
    h = relu(linear(pooled, store[f"{prefix}.fc1.w"], store[f"{prefix}.fc1.b"]))
    out = linear(h, store[f"{prefix}.fc2.w"], store[f"{prefix}.fc2.b"])
    if task.kind == "hpe":
        return reshape(out, (*out.shape[:-1], task.joints, 3))
    return out


class FusionModel:
    """A full modality-invariant model: encoders, fusion variant, task head.

    One parameter set serves every non-empty modality subset; forwarding a
    subset never touches the parameters of absent modalities.
    """

    def __init__(
        self,
        modalities: list[ModalityConfig],
        config: FusionConfig,
        task: TaskSpec,
        stub_dim: int,
        seed: int,
        identity_attention_out: bool = False,
    ):
        if not modalities:
            raise ValueError("FusionModel requires at least one modality")
        self.modalities = list(modalities)
        self.config = config
        self.task = task
        self.stub_dim = stub_dim
        self.ids = [m.id for m in modalities]
        spatial = [m.id for m in modalities if m.is_spatial]
        self.spatial_id = spatial[0] if spatial else None

        stub_rng, param_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
        self.stubs = {
            m.id: make_stub(m.raw_dim, config.tokens_per_modality, stub_dim, stub_rng) for m in modalities
        }
        self.params = ParameterStore()
        self._init_params(param_rng, identity_attention_out)

    def _init_params(self, rng: np.random.Generator, identity_out: bool) -> None:
        cfg = self.config
        for m in self.modalities:
            init_modality_encoder(self.params, f"enc.{m.id}", self.stub_dim, cfg.feature_dim, rng)
        if cfg.positional_encoding and self.spatial_id is not None:
            spatial_raw_dim = next(m.raw_dim for m in self.modalities if m.id == self.spatial_id)
            init_positional_encoder(
                self.params, "pos", spatial_raw_dim, cfg.tokens_per_modality, cfg.feature_dim, rng
            )
        if cfg.variant == "iterative-shared-block":
            for m in self.modalities:
                init_kv_generator(self.params, f"kv.{m.id}", cfg, rng)
            init_cross_modal(self.params, "cm", cfg, rng, identity_out)
            for m in self.modalities:
                init_cross_attention(self.params, f"ca.{m.id}", cfg, rng, identity_out)
        elif cfg.variant == "stacked-fresh-kv":
            for t in range(cfg.iterations):
                for m in self.modalities:
                    init_kv_generator(self.params, f"block{t}.kv.{m.id}", cfg, rng)
                init_cross_modal(self.params, f"block{t}.cm", cfg, rng, identity_out)
                for m in self.modalities:
                    init_cross_attention(self.params, f"block{t}.ca.{m.id}", cfg, rng, identity_out)
        elif cfg.variant == "stacked-shared-kv":
            for m in self.modalities:
                init_kv_generator(self.params, f"kv.{m.id}", cfg, rng)
            for t in range(cfg.iterations):
                init_cross_modal(self.params, f"block{t}.cm", cfg, rng, identity_out)
                for m in self.modalities:
                    init_cross_attention(self.params, f"block{t}.ca.{m.id}", cfg, rng, identity_out)
        else:  # transformer-only
            for t in range(cfg.iterations):
                init_self_attention(self.params, f"block{t}.sa", cfg, rng, identity_out)
        init_task_head(self.params, "head", cfg, self.task, rng)

    @property
    def existence_probs(self) -> tuple[float, ...]:
        return tuple(m.p_exist for m in self.modalities)

    def _present_ids(self, present) -> list[str]:
        flags = list(getattr(present, "present", present))
        if len(flags) != len(self.ids):
            raise ValueError(f"presence vector length {len(flags)} != {len(self.ids)} modalities")
        ids = [mid for mid, flag in zip(self.ids, flags) if flag]
        if not ids:
            raise ValueError("empty modality set")
        return ids

    def encode(self, raws: dict[str, np.ndarray], present) -> tuple[dict[str, Tensor], Tensor | None]:
        cfg = self.config
        ids = self._present_ids(present)
        features = {
            mid: encode_modality(raws[mid], self.stubs[mid], self.params, f"enc.{mid}", cfg.tokens_per_modality)
            for mid in ids
        }
        pos = None
        if cfg.positional_encoding and self.spatial_id in ids:
            pos = positional_encoding(
                raws[self.spatial_id],
                self.params,
                "pos",
                cfg.tokens_per_modality,
                cfg.feature_dim,
                enabled=True,
            )
        return features, pos

    def fuse(
        self,
        features: dict[str, Tensor],
        pos: Tensor | None,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        cfg = self.config
        ids = [mid for mid in self.ids if mid in features]
        drop = _Dropout(cfg.dropout_rate, rng, training)
        emb_mm = assemble_multimodal_embedding(features, self.ids, pos, cfg.combine_mode)
        if trace is not None:
            trace["kv_per_iteration"] = []

        if cfg.variant == "transformer-only":
            x = emb_mm
            for t in range(cfg.iterations):
                x = _self_attention_block(x, self.params, f"block{t}.sa", cfg, drop)
            return adaptive_avg_pool(x, cfg.tokens_per_modality)

        if cfg.variant == "iterative-shared-block":
            kv = {mid: generate_kv(features[mid], self.params, f"kv.{mid}", cfg) for mid in ids}
            emb_cm = None
            for t in range(cfg.iterations):
                if trace is not None:
                    trace["kv_per_iteration"].append(
                        {mid: (k.values.copy(), v.values.copy()) for mid, (k, v) in kv.items()}
                    )
                emb_cm = cross_modal_forward(emb_mm, self.params, "cm", cfg, drop)
                if t < cfg.iterations - 1:
                    blocks = [
                        cross_attention_inject(emb_cm, *kv[mid], self.params, f"ca.{mid}", cfg, drop)
                        for mid in ids
                    ]
                    emb_mm = blocks[0] if len(blocks) == 1 else concat(blocks, axis=-2)
            return emb_cm

        if cfg.variant == "stacked-shared-kv":
            kv = {mid: generate_kv(features[mid], self.params, f"kv.{mid}", cfg) for mid in ids}
            emb_cm = None
            for t in range(cfg.iterations):
                if trace is not None:
                    trace["kv_per_iteration"].append(
                        {mid: (k.values.copy(), v.values.copy()) for mid, (k, v) in kv.items()}
                    )
                emb_cm = cross_modal_forward(emb_mm, self.params, f"block{t}.cm", cfg, drop)
                if t < cfg.iterations - 1:
                    blocks = [
                        cross_attention_inject(emb_cm, *kv[mid], self.params, f"block{t}.ca.{mid}", cfg, drop)
                        for mid in ids
                    ]
                    emb_mm = blocks[0] if len(blocks) == 1 else concat(blocks, axis=-2)
            return emb_cm

        # stacked-fresh-kv: each layer regenerates keys/values from the
        # previous layer's per-modality blocks (encoder features at layer 0)
        blocks = {mid: features[mid] for mid in ids}
        emb_cm = None
        for t in range(cfg.iterations):
            last = t == cfg.iterations - 1
            kv = (
                {}
                if last
                else {mid: generate_kv(blocks[mid], self.params, f"block{t}.kv.{mid}", cfg) for mid in ids}
            )
            if trace is not None:
                trace["kv_per_iteration"].append(
                    {mid: (k.values.copy(), v.values.copy()) for mid, (k, v) in kv.items()}
                )
            emb_cm = cross_modal_forward(emb_mm, self.params, f"block{t}.cm", cfg, drop)
            if not last:
                blocks = {
                    mid: cross_attention_inject(emb_cm, *kv[mid], self.params, f"block{t}.ca.{mid}", cfg, drop)
                    for mid in ids
                }
                seq = [blocks[mid] for mid in ids]
                emb_mm = seq[0] if len(seq) == 1 else concat(seq, axis=-2)
        return emb_cm

    def forward(
        self,
        raws: dict[str, np.ndarray],
        present,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Run the model on a raw batch; returns (task output, fused embedding)."""
        features, pos = self.encode(raws, present)
        emb_cm = self.fuse(features, pos, training=training, rng=rng, trace=trace)
        out = task_head_forward(emb_cm, self.params, "head", self.task)
        return out, emb_cm
