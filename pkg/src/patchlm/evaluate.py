"""Held-out NLL / perplexity and the neuron-activation instrument."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import TransformerParams, embed, forward
from .patching import patch_embed

__all__ = ["eval_nll", "perplexity", "ActivationReport", "activation_rate", "percent_activated"]


def eval_nll(params: TransformerParams, eval_blocks: np.ndarray, batch_size: int = 32) -> float:
    """Mean next-token NLL over all non-initial positions of [n, T] blocks.

    Runs outside any tape (no gradients recorded); blocks are processed in
    fixed order so repeated calls give identical values.
    """
    eval_blocks = np.asarray(eval_blocks)
    if eval_blocks.ndim != 2 or eval_blocks.shape[0] == 0:
        raise ValueError("eval set must be a non-empty [n, T] block array")
    n, t_len = eval_blocks.shape
    if t_len < 2:
        raise ValueError("blocks must have at least 2 tokens")
    total = 0.0
    rows = 0
    for start in range(0, n, batch_size):
        chunk = eval_blocks[start : start + batch_size]
        x = embed(params, chunk)
        logits = forward(params, x, np.arange(t_len))
        vocab = logits.shape[2]
        used = T.narrow(logits, 1, 0, t_len - 1)
        flat = T.reshape(used, (len(chunk) * (t_len - 1), vocab))
        loss = T.cross_entropy(flat, chunk[:, 1:].reshape(-1))
        total += loss.item() * len(chunk) * (t_len - 1)
        rows += len(chunk) * (t_len - 1)
    return total / rows


def perplexity(nll: float) -> float:
    if nll < 0:
        raise ValueError("nll must be >= 0")
    return math.exp(nll)


def percent_activated(values: np.ndarray, threshold: float) -> float:
    """Percentage of entries with |v| strictly greater than the threshold."""
    values = np.asarray(values)
    return 100.0 * float(np.count_nonzero(np.abs(values) > threshold)) / values.size


@dataclass
class ActivationReport:
    """Per-layer share of feed-forward output neurons above the threshold."""

    percent_by_layer: list[float]
    threshold: float
    patch_size: int
    capture_mode: str = "pre_residual"
    layers: int = field(init=False)

    def __post_init__(self):
        self.layers = len(self.percent_by_layer)

    def table(self) -> str:
        lines = [f"layer  activated% (|v| > {self.threshold}, K={self.patch_size})"]
        for i, pct in enumerate(self.percent_by_layer):
            lines.append(f"{i:>5d}  {pct:8.3f}")
        return "\n".join(lines)


def activation_rate(params: TransformerParams, batch_tokens: np.ndarray,
                    threshold: float = 0.5, patch_size: int = 1,
                    capture_mode: str = "pre_residual") -> ActivationReport:
    """Measure per-layer activation percentages on one batch.

    For patch_size > 1 the batch is patch-embedded first, matching how the
    patch-stage model sees its input. Counting is strict: a value of exactly
    `threshold` is not activated. Percentages average over every
    neuron-position pair in the batch.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    batch_tokens = np.asarray(batch_tokens)
    if batch_tokens.ndim != 2:
        raise ValueError("expected [B, L] token batch")
    x = embed(params, batch_tokens)
    if patch_size > 1:
        x = patch_embed(x, patch_size)
    captured: list[np.ndarray] = []
    forward(params, x, np.arange(x.shape[1]), ffn_capture=captured, capture_mode=capture_mode)
    return ActivationReport(
        percent_by_layer=[percent_activated(layer, threshold) for layer in captured],
        threshold=threshold,
        patch_size=patch_size,
        capture_mode=capture_mode,
    )
