"""Losses, the ADAM update, and the mini-batch training loop.

Training is deterministic given the seed: per-epoch Fisher-Yates shuffling
driven by one generator, fixed summation order in the batch reduction, and a
fail-loud abort on any non-finite gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .neural import ModelState, iter_params


class TrainingError(RuntimeError):
    """Non-finite gradients or an inconsistent training setup."""


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

LOSS_KINDS = ("smooth_l1", "mse", "cross_entropy")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")


def loss_eval(spec: LossSpec, prediction: np.ndarray, target: np.ndarray):
    """Mean loss over all entries and its gradient w.r.t. the prediction.

    smooth_l1 is 0.5 (x-y)^2 where |x-y| < 1 and |x-y| - 0.5 elsewhere,
    with gradient clamp(x-y, -1, 1). cross_entropy takes logits of shape
    (batch, classes) and integer labels.
    """
    prediction = np.asarray(prediction, dtype=float)
    if spec.kind == "cross_entropy":
        labels = np.asarray(target)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("cross_entropy needs integer labels")
        if prediction.ndim != 2 or labels.shape != prediction.shape[:1]:
            raise ValueError("cross_entropy expects (batch, classes) logits "
                             "and (batch,) labels")
        shifted = prediction - prediction.max(axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=1))
        n = prediction.shape[0]
        value = float(np.mean(logz - shifted[np.arange(n), labels]))
        soft = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        grad = soft
        grad[np.arange(n), labels] -= 1.0
        return value, grad / n

    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.shape} vs "
                         f"target {target.shape}")
    diff = prediction - target
    n = diff.size
    if spec.kind == "mse":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    absd = np.abs(diff)
    vals = np.where(absd < 1.0, 0.5 * diff * diff, absd - 0.5)
    grad = np.clip(diff, -1.0, 1.0) / n
    return float(np.mean(vals)), grad


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @staticmethod
    def for_params(params: list[np.ndarray], learning_rate: float,
                   beta1: float = 0.9, beta2: float = 0.999) -> "AdamState":
        return AdamState(
            learning_rate=learning_rate, beta1=beta1, beta2=beta2,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray],
              param_names: list[str] | None = None) -> None:
    """One bias-corrected ADAM update, applied to the arrays in place."""
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise TrainingError("parameter/gradient/moment counts differ")
    for idx, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = param_names[idx] if param_names else f"param[{idx}]"
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment,
                          state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2)
                                                + state.epsilon_hat)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class Problem:
    """What the training loop needs from a learning task.

    ``state`` exposes the trainable ModelState; ``batch_loss`` evaluates one
    mini-batch (by sample indices) and returns (loss value, gradient
    ModelState); ``post_step`` re-imposes parameter constraints after an
    update (tied taps, pole projection).
    """

    state: ModelState

    def n_samples(self) -> int:
        raise NotImplementedError

    def batch_loss(self, indices: np.ndarray):
        raise NotImplementedError

    def post_step(self) -> None:
        pass


def train(problem: Problem, config: TrainConfig) -> list[tuple[int, int, float]]:
    """Run epochs x ceil(n/batch) ADAM steps; returns (epoch, batch, loss) rows."""
    n = problem.n_samples()
    if n == 0:
        raise TrainingError("empty dataset")
    names = [name for name, _ in iter_params(problem.state)]
    params = [arr for _, arr in iter_params(problem.state)]
    adam = AdamState.for_params(params, config.learning_rate, config.beta1,
                                config.beta2)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        for batch_idx, start in enumerate(range(0, n, config.batch_size)):
            indices = order[start:start + config.batch_size]
            loss, grads = problem.batch_loss(indices)
            grad_arrays = [arr for _, arr in iter_params(grads)]
            # params list references the state arrays, updated in place
            adam_step(adam, params, grad_arrays, param_names=names)
            problem.post_step()
            problem.state.bump_version()
            history.append((epoch, batch_idx, float(loss)))
    return history


def project_poles(gamma: np.ndarray, diagonal: np.ndarray, margin: float) -> None:
    """Push poles at least ``margin`` away from every shift diagonal entry,
    in place, preserving which side of the entry each pole sits on."""
    flat = gamma.reshape(-1)
    for d in np.unique(diagonal):
        close = np.abs(flat - d) < margin
        if not np.any(close):
            continue
        side = np.where(flat[close] >= d, 1.0, -1.0)
        flat[close] = d + side * margin


def write_loss_log(path, history: list[tuple[int, int, float]],
                   final_metrics: dict | None = None) -> None:
    """CSV log `epoch,batch,loss` plus one final metrics row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "batch", "loss"])
        for epoch, batch, loss in history:
            writer.writerow([epoch, batch, repr(loss)])
        if final_metrics:
            for key, value in sorted(final_metrics.items()):
                writer.writerow(["final", key, repr(float(value))])
