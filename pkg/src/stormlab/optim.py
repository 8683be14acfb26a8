"""AdamW with decoupled weight decay, plus the warmup/cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimError(Exception):
    pass


@dataclass
class AdamWState:
    """Per-parameter first/second moment accumulators and a step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.95, eps=1e-8,
               weight_decay=0.0, clip_norm=None):
    """One AdamW update, in place on the ``params`` dict of arrays.

    Weight decay is decoupled: p -= lr*wd*p applied separately from the
    bias-corrected moment update. ``clip_norm`` (off by default) rescales
    the global gradient norm before the moment update.
    """
    if lr <= 0:
        raise OptimError(f"lr must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name!r}")

    if clip_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / (total + 1e-12)
            grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise OptimError(f"gradient shape {g.shape} != param shape {p.shape} "
                             f"for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p -= lr * weight_decay * p
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``."""

    base_lr: float
    min_lr: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise OptimError(
                f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})"
            )
        if self.min_lr > self.base_lr:
            raise OptimError("min_lr must not exceed base_lr")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at ``step``; steps past the end clamp to ``min_lr``."""
    if step < 0:
        raise OptimError(f"negative step {step}")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.min_lr
    progress = (step - schedule.warmup_steps) / (
        schedule.total_steps - schedule.warmup_steps
    )
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * progress)
    )
