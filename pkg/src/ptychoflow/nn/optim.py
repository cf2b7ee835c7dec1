"""MAE loss, Adam and the triangular cyclic learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import ShapeError


def mae_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient ``sign(pred - target) / count`` (sign(0) = 0)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(np.abs(diff)))
    grad = (np.sign(diff) / diff.size).astype(pred.dtype)
    return loss, grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        if m.shape != p.shape:
            raise ShapeError(f"moment shape for {k} does not match parameter")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass(frozen=True)
class CyclicLRSchedule:
    base_lr: float = 1e-4
    max_lr: float = 1e-3
    step_size_up: int = 200

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.step_size_up < 1:
            raise ValueError("step_size_up must be >= 1")


def cyclic_lr(schedule: CyclicLRSchedule, step: int) -> float:
    """Triangular wave rising from base_lr to max_lr over ``step_size_up`` steps and back."""
    if step < 0:
        raise ValueError("step must be >= 0")
    phase = (step / schedule.step_size_up) % 2.0
    return schedule.base_lr + (schedule.max_lr - schedule.base_lr) * (1.0 - abs(phase - 1.0))
