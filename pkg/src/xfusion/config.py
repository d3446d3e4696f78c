"""Experiment configuration: INI-style files, built-in presets, stable digests.

The config file is flat structured text with sections [data], [model],
[train], an optional [ablate], and one [modality.<id>] section per sensor
stream (declaration order fixes the canonical modality order). Unknown keys
or sections are errors, never silently ignored.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, replace

from .data import SyntheticDataConfig
from .encoding import ModalityConfig
from .fusion import VARIANTS, FusionConfig, TaskSpec
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config_text",
    "desk_preset",
    "paper_preset",
    "canonical_text",
    "config_digest",
    "with_seed",
    "with_variant",
    "with_existence_probs",
]

# Table-style default for 3-modality ablation sweeps
DEFAULT_ABLATE_PROBS = ((0.5, 0.5, 0.8), (0.5, 0.7, 0.7), (0.5, 0.9, 0.6))


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticDataConfig
    model: FusionConfig
    stub_dim: int
    train: TrainConfig
    ablate_probs: tuple[tuple[float, ...], ...] | None = None
    preset: str = "custom"

    @property
    def task_spec(self) -> TaskSpec:
        if self.train.task == "hpe":
            return TaskSpec("hpe", joints=self.data.joints)
        return TaskSpec("har", num_classes=self.data.num_classes)

    @property
    def modality_ids(self) -> list[str]:
        return [m.id for m in self.data.modalities]


_DATA_KEYS = {
    "latent_dim": int,
    "train_samples": int,
    "eval_samples": int,
    "joints": int,
    "num_classes": int,
    "seed": int,
}
_MODEL_KEYS = {
    "tokens_per_modality": int,
    "feature_dim": int,
    "heads": int,
    "attention_scale": float,
    "iterations": int,
    "ffn_hidden": int,
    "variant": str,
    "post_norm": bool,
    "dropout_rate": float,
    "positional_encoding": bool,
    "combine_mode": str,
    "stub_dim": int,
}
_TRAIN_KEYS = {
    "task": str,
    "learning_rate": float,
    "batch_size": int,
    "steps": int,
    "optimizer": str,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "weight_decay": float,
    "seed": int,
    "sgd_momentum": float,
    "lr_decay_every": int,
    "lr_decay_gamma": float,
}
_TRAIN_OPTIONAL = {"sgd_momentum", "lr_decay_every", "lr_decay_gamma"}
_MODALITY_KEYS = {
    "raw_dim": int,
    "informative_dims": str,
    "noise_sigma": float,
    "p_exist": float,
    "spatial": bool,
}


def _parse_bool(raw: str, key: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigError(f"key '{key}': expected 'true' or 'false', got '{raw}'")


def _typed(section: dict, schema: dict, section_name: str, optional: set = frozenset()) -> dict:
    unknown = set(section) - set(schema)
    if unknown:
        raise ConfigError(f"unknown keys in [{section_name}]: {sorted(unknown)}")
    missing = set(schema) - set(section) - set(optional)
    if missing:
        raise ConfigError(f"missing keys in [{section_name}]: {sorted(missing)}")
    out = {}
    for key, caster in schema.items():
        if key not in section:
            continue
        raw = section[key].strip()
        try:
            out[key] = _parse_bool(raw, key) if caster is bool else caster(raw)
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(f"key '{key}' in [{section_name}]: {err}") from err
    return out


def _parse_dims(spec: str, latent_dim: int, modality: str) -> tuple[bool, ...]:
    mask = [False] * latent_dim
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "-" in chunk:
            lo, hi = chunk.split("-", 1)
            indices = range(int(lo), int(hi) + 1)
        else:
            indices = [int(chunk)]
        for i in indices:
            if not 0 <= i < latent_dim:
                raise ConfigError(f"modality '{modality}': informative dim {i} outside [0, {latent_dim})")
            mask[i] = True
    if not any(mask):
        raise ConfigError(f"modality '{modality}': informative_dims selects nothing")
    return tuple(mask)


def _dims_text(mask: tuple[bool, ...]) -> str:
    return ",".join(str(i) for i, flag in enumerate(mask) if flag)


def _parse_prob_list(raw: str, n_modalities: int) -> tuple[tuple[float, ...], ...]:
    vectors = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        probs = tuple(float(p) for p in chunk.split(","))
        if len(probs) != n_modalities:
            raise ConfigError(
                f"[ablate] existence_probs entry {probs} has {len(probs)} values, expected {n_modalities}"
            )
        vectors.append(probs)
    if not vectors:
        raise ConfigError("[ablate] existence_probs is empty")
    return tuple(vectors)


def parse_config_text(text: str, preset: str = "custom") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from err

    sections = set(parser.sections())
    modality_sections = [s for s in parser.sections() if s.startswith("modality.")]
    known = {"data", "model", "train", "ablate"} | set(modality_sections)
    unknown = sections - known
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    for required in ("data", "model", "train"):
        if required not in sections:
            raise ConfigError(f"missing required section [{required}]")
    if not modality_sections:
        raise ConfigError("at least one [modality.<id>] section is required")

    data_kv = _typed(dict(parser["data"]), _DATA_KEYS, "data")
    model_kv = _typed(dict(parser["model"]), _MODEL_KEYS, "model")
    train_kv = _typed(dict(parser["train"]), _TRAIN_KEYS, "train", optional=_TRAIN_OPTIONAL)

    modalities = []
    for section in modality_sections:  # declaration order is canonical
        mid = section[len("modality.") :]
        if not mid:
            raise ConfigError("modality section needs an id: [modality.<id>]")
        kv = _typed(dict(parser[section]), _MODALITY_KEYS, section)
        modalities.append(
            ModalityConfig(
                id=mid,
                raw_dim=kv["raw_dim"],
                informative_mask=_parse_dims(kv["informative_dims"], data_kv["latent_dim"], mid),
                noise_sigma=kv["noise_sigma"],
                p_exist=kv["p_exist"],
                is_spatial=kv["spatial"],
            )
        )

    ablate_probs = None
    if "ablate" in sections:
        kv = dict(parser["ablate"])
        unknown = set(kv) - {"existence_probs"}
        if unknown:
            raise ConfigError(f"unknown keys in [ablate]: {sorted(unknown)}")
        if "existence_probs" in kv:
            ablate_probs = _parse_prob_list(kv["existence_probs"], len(modalities))

    try:
        data = SyntheticDataConfig(
            latent_dim=data_kv["latent_dim"],
            n_train=data_kv["train_samples"],
            n_eval=data_kv["eval_samples"],
            joints=data_kv["joints"],
            num_classes=data_kv["num_classes"],
            modalities=tuple(modalities),
            seed=data_kv["seed"],
        )
        stub_dim = model_kv.pop("stub_dim")
        scale = model_kv.pop("attention_scale")
        model = FusionConfig(scale=scale, **model_kv)
        train = TrainConfig(**train_kv)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return ExperimentConfig(
        data=data, model=model, stub_dim=stub_dim, train=train, ablate_probs=ablate_probs, preset=preset
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def canonical_text(cfg: ExperimentConfig) -> str:
    """Normalized config rendering; the digest is a hash of this text."""

    def fmt(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    out = io.StringIO()
    out.write("[data]\n")
    for key, value in (
        ("latent_dim", cfg.data.latent_dim),
        ("train_samples", cfg.data.n_train),
        ("eval_samples", cfg.data.n_eval),
        ("joints", cfg.data.joints),
        ("num_classes", cfg.data.num_classes),
        ("seed", cfg.data.seed),
    ):
        out.write(f"{key} = {fmt(value)}\n")
    out.write("\n[model]\n")
    for key, value in (
        ("tokens_per_modality", cfg.model.tokens_per_modality),
        ("feature_dim", cfg.model.feature_dim),
        ("heads", cfg.model.heads),
        ("attention_scale", cfg.model.scale),
        ("iterations", cfg.model.iterations),
        ("ffn_hidden", cfg.model.ffn_hidden),
        ("variant", cfg.model.variant),
        ("post_norm", cfg.model.post_norm),
        ("dropout_rate", cfg.model.dropout_rate),
        ("positional_encoding", cfg.model.positional_encoding),
        ("combine_mode", cfg.model.combine_mode),
        ("stub_dim", cfg.stub_dim),
    ):
        out.write(f"{key} = {fmt(value)}\n")
    out.write("\n[train]\n")
    t = cfg.train
    for key, value in (
        ("task", t.task),
        ("learning_rate", t.learning_rate),
        ("batch_size", t.batch_size),
        ("steps", t.steps),
        ("optimizer", t.optimizer),
        ("beta1", t.beta1),
        ("beta2", t.beta2),
        ("eps", t.eps),
        ("weight_decay", t.weight_decay),
        ("seed", t.seed),
        ("sgd_momentum", t.sgd_momentum),
        ("lr_decay_every", t.lr_decay_every),
        ("lr_decay_gamma", t.lr_decay_gamma),
    ):
        out.write(f"{key} = {fmt(value)}\n")
    if cfg.ablate_probs is not None:
        out.write("\n[ablate]\n")
        rendered = "; ".join(",".join(repr(p) for p in probs) for probs in cfg.ablate_probs)
        out.write(f"existence_probs = {rendered}\n")
    for m in cfg.data.modalities:
        out.write(f"\n[modality.{m.id}]\n")
        for key, value in (
            ("raw_dim", m.raw_dim),
            ("informative_dims", _dims_text(m.informative_mask)),
            ("noise_sigma", m.noise_sigma),
            ("p_exist", m.p_exist),
            ("spatial", m.is_spatial),
        ):
            out.write(f"{key} = {fmt(value)}\n")
    return out.getvalue()


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Override the run (training) seed; dataset identity is untouched."""
    return replace(cfg, train=replace(cfg.train, seed=seed))


def with_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, variant=variant))


def with_existence_probs(cfg: ExperimentConfig, probs) -> ExperimentConfig:
    probs = tuple(float(p) for p in probs)
    if len(probs) != len(cfg.data.modalities):
        raise ConfigError(f"expected {len(cfg.data.modalities)} probabilities, got {len(probs)}")
    mods = tuple(replace(m, p_exist=p) for m, p in zip(cfg.data.modalities, probs))
    return replace(cfg, data=replace(cfg.data, modalities=mods))


def _mask_from_ranges(latent: int, *ranges) -> tuple[bool, ...]:
    mask = [False] * latent
    for lo, hi in ranges:
        for i in range(lo, hi + 1):
            mask[i] = True
    return tuple(mask)


def desk_preset(task: str = "hpe") -> ExperimentConfig:
    """Four synthetic modalities at desk scale; acceptance-friendly sizes."""
    latent = 12
    modalities = (
        ModalityConfig("I", 24, _mask_from_ranges(latent, (0, 5)), 0.05, 0.5, False),
        ModalityConfig("L", 24, _mask_from_ranges(latent, (3, 8)), 0.05, 0.9, True),
        ModalityConfig("R", 24, _mask_from_ranges(latent, (6, 11)), 0.05, 0.5, False),
        ModalityConfig("W", 24, _mask_from_ranges(latent, (0, 2), (9, 11)), 0.05, 0.5, False),
    )
    data = SyntheticDataConfig(
        latent_dim=latent,
        n_train=512,
        n_eval=128,
        joints=17,
        num_classes=8,
        modalities=modalities,
        seed=7,
    )
    model = FusionConfig(
        tokens_per_modality=8,
        feature_dim=64,
        heads=4,
        scale=0.25,
        iterations=4,
        ffn_hidden=128,
    )
    train = TrainConfig(task=task, learning_rate=1e-3 if task == "hpe" else 1e-4, batch_size=16, steps=2000)
    return ExperimentConfig(data=data, model=model, stub_dim=16, train=train, preset="desk")


def paper_preset(task: str = "hpe") -> ExperimentConfig:
    """Published model dimensions over the same synthetic data."""
    desk = desk_preset(task)
    model = FusionConfig(
        tokens_per_modality=32,
        feature_dim=512,
        heads=8,
        scale=0.125,
        iterations=4,
        ffn_hidden=1024,
    )
    return replace(desk, model=model, preset="paper")
