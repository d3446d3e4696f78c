"""Modality-invariant training: existence sampling, losses, optimizers, loop.

Each training batch draws one modality existence list from independent
Bernoulli occurrence probabilities (rejecting the all-absent outcome), masks
the input modalities accordingly, and takes one optimizer step. Everything is
deterministic given the run seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    NonFiniteError,
    ParameterStore,
    Tensor,
    backward,
    log_softmax,
    mean,
    mul,
    pick_class,
    sub,
)

__all__ = [
    "ExistenceList",
    "OccurrenceStats",
    "TrainConfig",
    "OptimState",
    "TrainStep",
    "TrainingDiverged",
    "sample_existence_list",
    "binomial_count_pmf",
    "compute_loss",
    "adamw_step",
    "sgd_step",
    "train_model",
]


@dataclass(frozen=True)
class ExistenceList:
    """Which modalities are present, plus their occurrence probabilities."""

    present: tuple[bool, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.present) != len(self.probs):
            raise ValueError("present and probs must have equal length")
        if not any(self.present):
            raise ValueError("existence list must have at least one present modality")


@dataclass
class OccurrenceStats:
    """Per-modality presence counts accumulated over sampled iterations."""

    counts: np.ndarray
    iterations: int = 0

    @classmethod
    def empty(cls, n_modalities: int) -> "OccurrenceStats":
        return cls(counts=np.zeros(n_modalities, dtype=np.int64), iterations=0)

    def record(self, existence: ExistenceList) -> None:
        self.counts += np.asarray(existence.present, dtype=np.int64)
        self.iterations += 1


def sample_existence_list(probs, rng: np.random.Generator) -> ExistenceList:
    """Independent Bernoulli draws conditioned on a non-empty outcome."""
    probs = tuple(float(p) for p in probs)
    if len(probs) < 1:
        raise ValueError("need at least one occurrence probability")
    if any(not 0.0 <= p <= 1.0 for p in probs):
        raise ValueError(f"occurrence probabilities must lie in [0, 1], got {probs}")
    if all(p == 0.0 for p in probs):
        raise ValueError("all occurrence probabilities are zero; a non-empty draw is impossible")
    while True:
        present = tuple(bool(rng.random() < p) for p in probs)
        if any(present):
            return ExistenceList(present=present, probs=probs)


def binomial_count_pmf(counts, m: int, probs) -> float:
    """Joint PMF of independent per-modality binomial occurrence counts.

    Accumulates in log space; zero-probability factors short-circuit to 0.
    """
    counts = [int(k) for k in counts]
    probs = [float(p) for p in probs]
    if len(counts) != len(probs):
        raise ValueError("counts and probs must have equal length")
    if m < 0:
        raise ValueError(f"iteration count m must be nonnegative, got {m}")
    log_total = 0.0
    for k, p in zip(counts, probs):
        if not 0 <= k <= m:
            raise ValueError(f"count {k} outside [0, {m}]")
        if p == 0.0:
            if k > 0:
                return 0.0
            continue
        if p == 1.0:
            if k < m:
                return 0.0
            continue
        log_total += math.lgamma(m + 1) - math.lgamma(k + 1) - math.lgamma(m - k + 1)
        log_total += k * math.log(p) + (m - k) * math.log1p(-p)
    return math.exp(log_total)


def compute_loss(pred: Tensor, target, task: str) -> Tensor:
    """Task loss: mean squared joint distance (hpe) or cross-entropy (har).

    Accepts a single sample or a batch (leading axis); batches average.
    """
    if task == "hpe":
        target_t = target if isinstance(target, Tensor) else Tensor(target)
        if pred.shape != target_t.shape or pred.shape[-1] != 3:
            raise ValueError(f"hpe loss: prediction {pred.shape} and target {target_t.shape} must match (J, 3)")
        diff = sub(pred, target_t)
        per_joint = mul(mean(mul(diff, diff), axis=-1), 3.0)  # squared euclidean per joint
        return mean(per_joint)
    if task == "har":
        labels = np.asarray(target)
        if labels.shape != pred.shape[:-1]:
            raise ValueError(f"har loss: labels shape {labels.shape} does not match logits {pred.shape}")
        nll = mul(pick_class(log_softmax(pred, axis=-1), labels.astype(np.int64)), -1.0)
        return mean(nll)
    raise ValueError(f"unknown task '{task}'")


@dataclass
class TrainConfig:
    task: str
    learning_rate: float
    batch_size: int = 16
    steps: int = 2000
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    sgd_momentum: float = 0.9
    lr_decay_every: int = 0  # 0 disables the step-decay schedule (sgd only)
    lr_decay_gamma: float = 0.1

    def __post_init__(self):
        if self.task not in ("hpe", "har"):
            raise ValueError(f"unknown task '{self.task}'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class OptimState:
    """First/second moment buffers and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _check_grad(name: str, grad: np.ndarray | None) -> np.ndarray:
    if grad is None:
        raise ValueError(f"parameter '{name}' has no gradient; run backward first")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    return grad


def adamw_step(store: ParameterStore, state: OptimState, config: TrainConfig) -> None:
    """Decoupled-weight-decay update with bias-corrected moments."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, param in store.items():
        g = _check_grad(name, param.grad)
        m = state.m.setdefault(name, np.zeros_like(param.values))
        v = state.v.setdefault(name, np.zeros_like(param.values))
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        # decoupled decay acts on the pre-step parameter values
        update = config.learning_rate * (m_hat / (np.sqrt(v_hat) + config.eps))
        update += config.learning_rate * config.weight_decay * param.values
        param.values -= update


def sgd_step(store: ParameterStore, state: OptimState, config: TrainConfig) -> None:
    """Momentum SGD with decoupled weight decay and optional step-decay LR."""
    state.t += 1
    lr = config.learning_rate
    if config.lr_decay_every > 0:
        lr *= config.lr_decay_gamma ** ((state.t - 1) // config.lr_decay_every)
    for name, param in store.items():
        g = _check_grad(name, param.grad)
        m = state.m.setdefault(name, np.zeros_like(param.values))
        m[:] = config.sgd_momentum * m + g
        update = lr * m + lr * config.weight_decay * param.values
        param.values -= update


@dataclass(frozen=True)
class TrainStep:
    step: int
    loss: float
    present: tuple[bool, ...]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


def train_model(model, dataset, config: TrainConfig) -> list[TrainStep]:
    """Fit `model` on the training split with modality-invariant sampling.

    One existence list is drawn per batch. Returns the per-step history;
    aborts with the step index if the loss turns non-finite.
    """
    sampler_rng, dropout_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    ]
    probs = model.existence_probs
    n_train = dataset.n_train
    targets = dataset.train_keypoints if config.task == "hpe" else dataset.train_labels
    state = OptimState()
    step_fn = adamw_step if config.optimizer == "adamw" else sgd_step
    history: list[TrainStep] = []
    for step in range(config.steps):
        existence = sample_existence_list(probs, sampler_rng)
        idx = sampler_rng.integers(0, n_train, size=config.batch_size)
        raws = {
            mid: dataset.train_raws[mid][idx]
            for mid, flag in zip(model.ids, existence.present)
            if flag
        }
        try:
            pred, _ = model.forward(raws, existence.present, training=True, rng=dropout_rng)
            loss = compute_loss(pred, targets[idx], config.task)
            model.params.zero_grad()
            backward(loss, model.params)
            step_fn(model.params, state, config)
        except NonFiniteError as err:
            raise TrainingDiverged(step, str(err)) from err
        history.append(TrainStep(step=step, loss=loss.item(), present=existence.present))
    return history
