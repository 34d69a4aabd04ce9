"""The four training objectives, as differentiable scalar ops.

Event detection uses a summed sigmoid cross-entropy over all (class, frame)
cells; scene classification uses a softmax cross-entropy against either a
one-hot label or a temperature-softened teacher distribution. The combined
objectives weight the scene term by alpha (hard) or beta (soft).

All ops are fused: forward passes use log-sum-exp / log1p stabilizations and
backward passes use the exact closed-form gradients, recorded on the active
autodiff tape.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accumulate, _record, _sigmoid_values
from .errors import ArgumentError, DimensionError


@dataclass
class SceneTarget:
    """A scene label: one-hot or a soft probability vector over C scenes."""

    kind: str  # "one_hot" | "soft"
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.kind not in ("one_hot", "soft"):
            raise ArgumentError(f"unknown scene target kind {self.kind!r}")
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise ArgumentError("scene target must be a non-empty vector")
        if np.any(self.probs < 0.0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ArgumentError("scene target must be a probability vector")
        if self.kind == "one_hot" and np.count_nonzero(self.probs == 1.0) != 1:
            raise ArgumentError("one-hot target must have exactly one entry equal to 1")

    @classmethod
    def one_hot(cls, index: int, n_scenes: int) -> "SceneTarget":
        probs = np.zeros(n_scenes)
        probs[index] = 1.0
        return cls("one_hot", probs)

    @classmethod
    def soft(cls, probs) -> "SceneTarget":
        return cls("soft", probs)


@dataclass
class LossWeights:
    """Scene-loss weight alpha (hard), beta (soft) and softmax temperature."""

    alpha: float = 0.0
    beta: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ArgumentError("loss weights must be nonnegative")
        if self.temperature <= 0.0:
            raise ArgumentError("temperature must be positive")


def event_loss(logits: Tensor, roll: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Summed sigmoid cross-entropy between (M, N) event logits and a binary
    activity roll, restricted to frames where mask is nonzero.

    Computed in the logit form max(y,0) - y*z + log(1 + exp(-|y|)), which is
    exact and never overflows.
    """
    y = logits.values
    roll = np.asarray(roll, dtype=np.float64)
    if roll.shape != y.shape:
        raise DimensionError(
            f"event roll shape {roll.shape} does not match logits {y.shape}"
        )
    if mask is None:
        mask = np.ones(y.shape[1])
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (y.shape[1],):
        raise DimensionError(
            f"mask shape {mask.shape} does not match {y.shape[1]} frames"
        )
    cell = np.maximum(y, 0.0) - y * roll + np.log1p(np.exp(-np.abs(y)))
    out = Tensor((cell * mask).sum())

    def backward(g):
        _accumulate(logits, float(g) * (_sigmoid_values(y) - roll) * mask)

    return _record(out, backward)


def _log_softmax(u: np.ndarray) -> np.ndarray:
    shifted = u - u.max()
    return shifted - np.log(np.exp(shifted).sum())


def scene_hard_loss(logits: Tensor, target: SceneTarget) -> Tensor:
    """Softmax cross-entropy of scene logits against a one-hot target."""
    if target.kind != "one_hot":
        raise ArgumentError("scene_hard_loss requires a one-hot target")
    return _scene_cross_entropy(logits, target.probs, 1.0)


def distill_targets(teacher_logits: np.ndarray, temperature: float) -> np.ndarray:
    """Teacher soft label: temperature softmax of the teacher's logits.

    Pure numpy on purpose; gradients never flow into the teacher.
    """
    p = ad.softmax_temperature(ad.tensor(teacher_logits), temperature)
    return p.values


def soft_scene_loss(logits: Tensor, soft_target: np.ndarray, temperature: float) -> Tensor:
    """Cross-entropy between the temperature softmax of the student's scene
    logits and a fixed soft target distribution.
    """
    if temperature <= 0.0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    p = np.asarray(soft_target, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0.0):
        raise ArgumentError("soft target is not a normalized probability vector")
    return _scene_cross_entropy(logits, p, temperature)


def _scene_cross_entropy(logits: Tensor, p: np.ndarray, temperature: float) -> Tensor:
    if p.shape != logits.values.shape:
        raise DimensionError(
            f"target shape {p.shape} does not match logits {logits.values.shape}"
        )
    lsm = _log_softmax(logits.values / temperature)
    out = Tensor(-(p * lsm).sum())

    def backward(g):
        _accumulate(logits, float(g) * (np.exp(lsm) - p) / temperature)

    return _record(out, backward)


def mtl_objective(event_term: Tensor, scene_term: Tensor, alpha: float) -> Tensor:
    """Joint objective: event loss plus alpha times the hard scene loss."""
    return ad.add(event_term, ad.scale(scene_term, alpha))


def proposed_objective(event_term: Tensor, soft_scene_term: Tensor, beta: float) -> Tensor:
    """Joint objective: event loss plus beta times the soft scene loss."""
    return ad.add(event_term, ad.scale(soft_scene_term, beta))
