"""Patch-level machinery: building patch embeddings from K consecutive token
embeddings, aligning next-patch targets, the shared-head multi-token loss,
mixup patch construction, and the optional input/output linear projections
(ablation variants whose extra parameters are stripped before stage two).

With K = 1 every path here reduces bit-exactly to ordinary token-level
training: a patch of one token is the token.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "PatchConfig",
    "AuxProjections",
    "init_aux",
    "patch_embed",
    "next_patch_targets",
    "next_patch_loss",
    "mixup_patch",
    "mixup_targets",
    "apply_input_proj",
    "apply_output_proj",
    "output_proj_loss",
    "strip_aux",
]


@dataclass
class PatchConfig:
    patch_size: int = 4
    lam: Fraction = Fraction(2, 3)
    context_tokens: int = 2048
    patch_context_mode: str = "full"  # "full": K*T tokens/sample; "reduced": T tokens/sample
    strategy: str = "consecutive"  # or "mixup"
    input_proj_enabled: bool = False
    output_proj_enabled: bool = False

    def __post_init__(self):
        self.lam = Fraction(self.lam)
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.context_tokens < 2:
            raise ValueError("context_tokens must be >= 2")
        if self.patch_context_mode not in ("full", "reduced"):
            raise ValueError(f"unknown patch_context_mode {self.patch_context_mode!r}")
        if self.strategy not in ("consecutive", "mixup"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.patch_context_mode == "reduced" and self.context_tokens % self.patch_size != 0:
            raise ValueError("reduced mode needs patch_size to divide context_tokens")

    @property
    def patch_block_length(self) -> int:
        """Tokens per patch-stage sample."""
        if self.strategy == "mixup":
            return self.context_tokens
        if self.patch_context_mode == "reduced":
            return self.context_tokens
        return self.patch_size * self.context_tokens


@dataclass
class AuxProjections:
    """Stage-one-only linear maps; never part of a token-stage checkpoint."""

    w_in: Tensor | None = None  # [K*d, d]
    w_out: Tensor | None = None  # [d, K*d]

    def all(self) -> list[Tensor]:
        return [t for t in (self.w_in, self.w_out) if t is not None]

    def named(self):
        out = []
        if self.w_in is not None:
            out.append(("aux.w_in", self.w_in))
        if self.w_out is not None:
            out.append(("aux.w_out", self.w_out))
        return out


def init_aux(hidden_size: int, patch: PatchConfig, seed: int, dtype=np.float32) -> AuxProjections:
    rng = np.random.default_rng(seed)
    k, d = patch.patch_size, hidden_size

    def draw(shape):
        return Tensor((rng.standard_normal(shape, dtype=np.float64) * 0.02).astype(dtype),
                      requires_grad=True)

    return AuxProjections(
        w_in=draw((k * d, d)) if patch.input_proj_enabled else None,
        w_out=draw((d, k * d)) if patch.output_proj_enabled else None,
    )


def _split_patches(length: int, k: int) -> int:
    if k < 1:
        raise ValueError("patch size must be >= 1")
    if length % k != 0:
        raise ValueError(f"sequence length {length} not divisible by patch size {k}")
    return length // k


def patch_embed(token_embeddings: Tensor, k: int) -> Tensor:
    """Average every k consecutive token embeddings: [B, k*T, d] -> [B, T, d]."""
    b, length, d = token_embeddings.shape
    t = _split_patches(length, k)
    grouped = T.reshape(token_embeddings, (b, t, k, d))
    return T.mean_axis(grouped, 2)


def next_patch_targets(tokens: np.ndarray, k: int) -> np.ndarray:
    """Targets for patch position i are the k tokens of patch i+1: [B, T-1, k].

    The final patch position has nothing to predict and is dropped by the
    loss; the first patch's tokens are never targets.
    """
    tokens = np.asarray(tokens)
    b, length = tokens.shape
    t = _split_patches(length, k)
    if t < 2:
        raise ValueError("need at least 2 patches to form next-patch targets")
    return tokens.reshape(b, t, k)[:, 1:, :]


def next_patch_loss(logits: Tensor, tokens: np.ndarray, k: int) -> Tensor:
    """Shared-head next-patch loss, normalized per target token.

    Each patch position's single prediction vector is scored against all k
    tokens of the following patch; the k cross-entropy terms are averaged so
    the value is comparable across patch sizes and equals the token-level
    shifted cross-entropy when k == 1.
    """
    targets = next_patch_targets(tokens, k)
    b, tm1, _ = targets.shape
    if logits.shape[:2] != (b, tm1 + 1):
        raise ValueError(f"logits {logits.shape} do not match {b} x {tm1 + 1} patch positions")
    vocab = logits.shape[2]
    used = T.narrow(logits, 1, 0, tm1)
    return T.cross_entropy_multi(T.reshape(used, (b * tm1, vocab)), targets.reshape(b * tm1, k))


def mixup_targets(sample_tokens: np.ndarray) -> np.ndarray:
    """Position-wise targets for k mixed samples [k, T] -> [T-1, k]."""
    sample_tokens = np.asarray(sample_tokens)
    if sample_tokens.ndim != 2:
        raise ValueError("expected [k, T] sample tokens")
    return sample_tokens[:, 1:].T


def mixup_patch(sample_embeddings: list[Tensor], sample_tokens: np.ndarray):
    """Mix k same-length samples position-wise into one patch sequence.

    Returns the mixed [T, d] embedding (mean over samples at each position)
    and the [T-1, k] targets: at position i, the k samples' tokens at i+1.
    Scored with the same shared-head loss as consecutive patching.
    """
    if not sample_embeddings:
        raise ValueError("need at least one sample")
    shape = sample_embeddings[0].shape
    for e in sample_embeddings[1:]:
        if e.shape != shape:
            raise ValueError("mixup samples must share one shape")
    k = len(sample_embeddings)
    if np.asarray(sample_tokens).shape != (k, shape[0]):
        raise ValueError("sample_tokens must be [k, T] matching the embeddings")
    mixed = sample_embeddings[0]
    for e in sample_embeddings[1:]:
        mixed = T.add(mixed, e)
    mixed = T.scale(mixed, 1.0 / k)
    return mixed, mixup_targets(sample_tokens)


def mixup_loss(logits: Tensor, batch_tokens: np.ndarray) -> Tensor:
    """Shared-head loss for a mixed batch: logits [B, T, V], tokens [B, k, T]."""
    batch_tokens = np.asarray(batch_tokens)
    b, k, length = batch_tokens.shape
    if logits.shape[:2] != (b, length):
        raise ValueError(f"logits {logits.shape} do not match mixed batch {b} x {length}")
    vocab = logits.shape[2]
    targets = batch_tokens[:, :, 1:].transpose(0, 2, 1)  # [B, T-1, k]
    used = T.narrow(logits, 1, 0, length - 1)
    return T.cross_entropy_multi(T.reshape(used, (b * (length - 1), vocab)),
                                 targets.reshape(b * (length - 1), k))


def apply_input_proj(token_embeddings: Tensor, w_in: Tensor, k: int) -> Tensor:
    """Project each patch's concatenated k token embeddings through w_in [k*d, d]."""
    if w_in is None:
        raise RuntimeError("input projection is not enabled")
    b, length, d = token_embeddings.shape
    t = _split_patches(length, k)
    if w_in.shape != (k * d, d):
        raise ValueError(f"w_in shape {w_in.shape} != ({k * d}, {d})")
    flat = T.reshape(token_embeddings, (b * t, k * d))
    return T.reshape(T.matmul(flat, w_in), (b, t, d))


def apply_output_proj(hidden: Tensor, w_out: Tensor, head: Tensor) -> Tensor:
    """Expand patch states to k token slots, then share the output head.

    hidden [B, T, d] @ w_out [d, k*d] is split into k width-d slices, each
    projected by head [d, V]; returns per-offset logits [B, T, k, V].
    """
    if w_out is None:
        raise RuntimeError("output projection is not enabled")
    b, t, d = hidden.shape
    kd = w_out.shape[1]
    if w_out.shape[0] != d or kd % d != 0:
        raise ValueError(f"w_out shape {w_out.shape} incompatible with hidden size {d}")
    k = kd // d
    vocab = head.shape[1]
    expanded = T.matmul(T.reshape(hidden, (b * t, d)), w_out)
    slices = T.reshape(expanded, (b * t * k, d))
    return T.reshape(T.matmul(slices, head), (b, t, k, vocab))


def output_proj_loss(logits: Tensor, tokens: np.ndarray, k: int) -> Tensor:
    """Per-offset variant of next_patch_loss for [B, T, k, V] logits."""
    targets = next_patch_targets(tokens, k)
    b, tm1, _ = targets.shape
    if logits.shape[:3] != (b, tm1 + 1, k):
        raise ValueError(f"logits {logits.shape} do not match {b} x {tm1 + 1} x {k}")
    vocab = logits.shape[3]
    used = T.narrow(logits, 1, 0, tm1)
    return T.cross_entropy(T.reshape(used, (b * tm1 * k, vocab)), targets.reshape(-1))


def strip_aux(params, aux: AuxProjections | None):
    """Drop the stage-one projections; the backbone passes through untouched."""
    return params
