"""Reference fusion baselines: feature-level concat and decision-level averaging."""

from __future__ import annotations

import numpy as np

from .encoding import ModalityConfig, assemble_multimodal_embedding, encode_modality, init_modality_encoder, make_stub
from .fusion import FusionConfig, TaskSpec, init_task_head, task_head_forward
from .tensor import ParameterStore, Tensor, adaptive_avg_pool, mean, no_grad

__all__ = ["FeatureConcatBaseline", "DecisionAverageEnsemble"]


class FeatureConcatBaseline:
    """Concatenate present modality blocks, pool, and map through an MLP head.

    Shares the training-loop interface with the fusion model: one parameter
    set serves every modality subset.
    """

    def __init__(
        self,
        modalities: list[ModalityConfig],
        config: FusionConfig,
        task: TaskSpec,
        stub_dim: int,
        seed: int,
    ):
        if not modalities:
            raise ValueError("baseline requires at least one modality")
        self.modalities = list(modalities)
        self.config = config
        self.task = task
        self.stub_dim = stub_dim
        self.ids = [m.id for m in modalities]
        stub_rng, param_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
        self.stubs = {
            m.id: make_stub(m.raw_dim, config.tokens_per_modality, stub_dim, stub_rng) for m in modalities
        }
        self.params = ParameterStore()
        for m in modalities:
            init_modality_encoder(self.params, f"enc.{m.id}", stub_dim, config.feature_dim, param_rng)
        init_task_head(self.params, "head", config, task, param_rng)

    @property
    def existence_probs(self) -> tuple[float, ...]:
        return tuple(m.p_exist for m in self.modalities)

    def forward(self, raws, present, *, training=False, rng=None, trace=None):
        flags = list(getattr(present, "present", present))
        ids = [mid for mid, flag in zip(self.ids, flags) if flag]
        if not ids:
            raise ValueError("empty modality set")
        cfg = self.config
        features = {
            mid: encode_modality(raws[mid], self.stubs[mid], self.params, f"enc.{mid}", cfg.tokens_per_modality)
            for mid in ids
        }
        emb = assemble_multimodal_embedding(features, self.ids, None, "concat")
        pooled = adaptive_avg_pool(emb, cfg.tokens_per_modality)
        out = task_head_forward(pooled, self.params, "head", self.task)
        return out, pooled


class DecisionAverageEnsemble:
    """Average the outputs of independently trained single-modality models."""

    def __init__(self, members: dict[str, FeatureConcatBaseline]):
        if not members:
            raise ValueError("ensemble requires at least one member model")
        self.members = dict(members)
        first = next(iter(members.values()))
        self.ids = list(members)
        self.task = first.task
        self.config = first.config

    def forward(self, raws, present, *, training=False, rng=None, trace=None):
        flags = list(getattr(present, "present", present))
        ids = [mid for mid, flag in zip(self.ids, flags) if flag]
        if not ids:
            raise ValueError("empty modality set")
        outs = []
        embs = []
        with no_grad():
            for mid in ids:
                member = self.members[mid]
                member_present = [other == mid for other in member.ids]
                out, emb = member.forward({mid: raws[mid]}, member_present)
                outs.append(out.values)
                embs.append(emb.values)
        fused = np.mean(np.stack(outs), axis=0)
        emb_mean = np.mean(np.stack(embs), axis=0)
        return Tensor(fused), Tensor(emb_mean)
