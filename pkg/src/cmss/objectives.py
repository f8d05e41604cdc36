"""Losses and schedules for the adversarial curriculum game.

All functions are pure and dtype-agnostic (float32 for training, float64
in the gradient-check suite). Discriminator outputs are assumed to lie
strictly inside (0, 1), which the network clamp guarantees, so the log
terms here are always finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


def compute_lambda(p: float, gamma: float = 10.0) -> float:
    """Annealing coefficient 2 / (1 + exp(-gamma * p)) - 1 for training
    progress p in [0, 1]. Starts at 0 and saturates below 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress p={p} outside [0, 1]")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


@dataclass(frozen=True)
class Schedule:
    """Maps an iteration counter to the annealing coefficient."""

    n_iter: int
    gamma: float = 10.0

    def value(self, t: int) -> float:
        if self.n_iter <= 0:
            return 0.0
        return compute_lambda(t / self.n_iter, self.gamma)


@dataclass(frozen=True)
class WeightVector:
    """Per-sample curriculum weights for one source batch: nonnegative,
    summing to the batch size."""

    w: torch.Tensor
    raw: torch.Tensor


def normalize_weights(raw_scores: torch.Tensor) -> WeightVector:
    """softmax(raw) * batch_size, computed max-shifted so arbitrarily large
    scores cannot overflow. Equal scores give exactly unit weights."""
    if raw_scores.numel() == 0:
        raise ValueError("empty batch")
    if not torch.isfinite(raw_scores).all():
        raise ValueError("raw scores must be finite")
    n = raw_scores.shape[0]
    e = torch.exp(raw_scores - raw_scores.max().detach())
    # Single scale factor keeps w == 1.0 bit-exact for uniform scores.
    w = e * (n / e.sum())
    return WeightVector(w=w, raw=raw_scores)


def loss_cls(class_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the true class under softmax logits."""
    n_classes = class_logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("class label out of range")
    return torch.nn.functional.cross_entropy(class_logits, labels)


def _target_half(d_t: torch.Tensor) -> torch.Tensor:
    return -torch.log1p(-d_t).mean()


def loss_dom(d_s: torch.Tensor, d_t: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: -mean log D on source - mean log(1 - D) on target."""
    return -torch.log(d_s).mean() + _target_half(d_t)


def loss_wdom(d_s: torch.Tensor, d_t: torch.Tensor, weights: WeightVector) -> torch.Tensor:
    """Curriculum-weighted discriminator loss. Weights apply to the source
    half only; with unit weights this equals `loss_dom` exactly."""
    if weights.w.shape != d_s.shape:
        raise ValueError("weight/batch length mismatch")
    return -(weights.w * torch.log(d_s)).mean() + _target_half(d_t)


def cmss_objective(d_s: torch.Tensor, weights: WeightVector) -> torch.Tensor:
    """Mean of w_i * log D_s,i: the quantity the curriculum scorer descends,
    pushing weight toward samples the discriminator finds hard."""
    if weights.w.shape != d_s.shape:
        raise ValueError("weight/batch length mismatch")
    return (weights.w * torch.log(d_s)).mean()
