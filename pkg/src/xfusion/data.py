"""Synthetic complementary multimodal dataset.

Samples share a latent vector; each modality observes a masked linear view of
it plus Gaussian noise, so modalities with disjoint masks carry complementary
information. Keypoint targets are a fixed linear map of the latent; activity
labels come from nearest-prototype assignment. Everything derives
deterministically from the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import ModalityConfig, validate_modalities

__all__ = ["SyntheticDataConfig", "SyntheticDataset", "generate_synthetic_dataset"]


@dataclass(frozen=True)
class SyntheticDataConfig:
    latent_dim: int
    n_train: int
    n_eval: int
    joints: int
    num_classes: int
    modalities: tuple[ModalityConfig, ...]
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("sample counts must be positive")
        if self.joints < 3:
            raise ValueError("joints must be >= 3")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        validate_modalities(list(self.modalities), self.latent_dim)


@dataclass
class SyntheticDataset:
    config: SyntheticDataConfig
    train_raws: dict[str, np.ndarray]
    eval_raws: dict[str, np.ndarray]
    train_keypoints: np.ndarray
    eval_keypoints: np.ndarray
    train_labels: np.ndarray
    eval_labels: np.ndarray
    train_latents: np.ndarray
    eval_latents: np.ndarray

    @property
    def n_train(self) -> int:
        return self.train_latents.shape[0]

    @property
    def n_eval(self) -> int:
        return self.eval_latents.shape[0]

    def sample(self, index: int, split: str = "train") -> dict:
        """Per-sample view: modality id -> raw vector, plus both targets."""
        raws = self.train_raws if split == "train" else self.eval_raws
        keypoints = self.train_keypoints if split == "train" else self.eval_keypoints
        labels = self.train_labels if split == "train" else self.eval_labels
        return {
            "raws": {mid: arr[index] for mid, arr in raws.items()},
            "keypoints": keypoints[index],
            "label": int(labels[index]),
        }


def generate_synthetic_dataset(config: SyntheticDataConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    d_z = config.latent_dim
    n_total = config.n_train + config.n_eval

    # fixed structural maps are drawn first so sample counts do not shift them
    keypoint_map = rng.normal(scale=1.0 / np.sqrt(d_z), size=(config.joints * 3, d_z))
    prototypes = rng.normal(size=(config.num_classes, d_z))
    mixing = {
        m.id: rng.normal(scale=1.0 / np.sqrt(d_z), size=(m.raw_dim, d_z)) for m in config.modalities
    }

    latents = rng.normal(size=(n_total, d_z))
    keypoints = (latents @ keypoint_map.T).reshape(n_total, config.joints, 3)
    labels = (latents @ prototypes.T).argmax(axis=1).astype(np.int64)

    raws = {}
    for m in config.modalities:
        masked = latents * np.asarray(m.informative_mask, dtype=np.float64)
        clean = masked @ mixing[m.id].T
        noise = rng.normal(size=(n_total, m.raw_dim))
        raws[m.id] = clean + m.noise_sigma * noise

    split = config.n_train
    return SyntheticDataset(
        config=config,
        train_raws={mid: arr[:split] for mid, arr in raws.items()},
        eval_raws={mid: arr[split:] for mid, arr in raws.items()},
        train_keypoints=keypoints[:split],
        eval_keypoints=keypoints[split:],
        train_labels=labels[:split],
        eval_labels=labels[split:],
        train_latents=latents[:split],
        eval_latents=latents[split:],
    )
