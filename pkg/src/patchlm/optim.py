"""AdamW with decoupled weight decay, global-norm clipping, and the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWState", "adamw_step", "clip_grad_global", "LrSchedule", "lr_at"]


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared hyperparameters.

    Moments are allocated lazily in the parameter dtype and zeroed on reset,
    so a freshly built or reset state always has step_count == 0.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], **hypers) -> "AdamWState":
        state = cls(**hypers)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state

    def reset(self) -> None:
        self.step_count = 0
        for buf in self.m:
            buf[...] = 0
        for buf in self.v:
            buf[...] = 0


def adamw_step(params: list[Tensor], state: AdamWState, lr: float) -> None:
    """One AdamW update in place; a missing gradient counts as zero."""
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)} params")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match param shape {p.data.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * update


def clip_grad_global(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm. Gradients are scaled in place; tensors with
    no gradient contribute zero.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    sq = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.reshape(-1)
            sq += float(np.dot(g, g))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class LrSchedule:
    """Linear warmup from 0 to peak, then cosine decay to floor_fraction * peak."""

    total_steps: int
    peak_lr: float = 3e-4
    warmup_steps: int = 2000
    floor_fraction: float = 0.1


def lr_at(schedule: LrSchedule, step: int) -> float:
    peak = schedule.peak_lr
    warmup = schedule.warmup_steps
    total = schedule.total_steps
    floor = schedule.floor_fraction * peak
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < warmup:
        return peak * step / warmup
    if step == warmup:
        return peak
    if step >= total:
        return floor
    progress = (step - warmup) / (total - warmup)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
