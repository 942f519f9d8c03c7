"""Decoder-only transformer: pre-norm blocks with causal attention (RoPE on
q/k), SwiGLU feed-forward, final RMSNorm, untied output head. No biases, no
dropout. The same backbone serves both training stages; only the embeddings
fed in and the loss read out differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["ModelConfig", "TransformerParams", "init_params", "param_count", "embed", "forward"]


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int
    intermediate_size: int
    n_layers: int
    n_heads: int
    max_context: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if min(self.vocab_size, self.hidden_size, self.intermediate_size,
               self.n_layers, self.n_heads, self.max_context) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.hidden_size % self.n_heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads


# Parameter names, in checkpoint order.
def _param_names(config: ModelConfig) -> list[str]:
    names = ["embed.weight"]
    for i in range(config.n_layers):
        names += [
            f"layers.{i}.norm_attn.weight",
            f"layers.{i}.attn.wq",
            f"layers.{i}.attn.wk",
            f"layers.{i}.attn.wv",
            f"layers.{i}.attn.wo",
            f"layers.{i}.norm_ffn.weight",
            f"layers.{i}.ffn.w1",
            f"layers.{i}.ffn.w3",
            f"layers.{i}.ffn.w2",
        ]
    names += ["final_norm.weight", "head.weight"]
    return names


def _param_shape(name: str, c: ModelConfig) -> tuple[int, ...]:
    d, dff = c.hidden_size, c.intermediate_size
    if name == "embed.weight":
        return (c.vocab_size, d)
    if name == "head.weight":
        return (d, c.vocab_size)
    if name.endswith("norm.weight") or ".norm_" in name:
        return (d,)
    leaf = name.rsplit(".", 1)[-1]
    return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w1": (d, dff), "w3": (d, dff), "w2": (dff, d)}[leaf]


class TransformerParams:
    """The full learnable set, addressable by name for checkpointing."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = _param_names(config)
        if list(tensors) != expected:
            raise ValueError("parameter set does not match the config's layout")
        for name, t in tensors.items():
            if t.shape != _param_shape(name, config):
                raise ValueError(f"{name}: shape {t.shape} != expected {_param_shape(name, config)}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def all(self) -> list[Tensor]:
        return list(self.tensors.values())

    def element_total(self) -> int:
        return sum(t.size for t in self.tensors.values())


def param_count(config: ModelConfig) -> int:
    """Closed-form element count: V*d + L*(4d^2 + 3d*dff + 2d) + d + d*V."""
    d, dff, big_l, v = config.hidden_size, config.intermediate_size, config.n_layers, config.vocab_size
    return v * d + big_l * (4 * d * d + 3 * d * dff + 2 * d) + d + d * v


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> TransformerParams:
    """Weights ~ normal(0, 0.02), norm weights exactly 1; reproducible from seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in _param_names(config):
        shape = _param_shape(name, config)
        if "norm" in name:
            data = np.ones(shape, dtype=dtype)
        else:
            data = (rng.standard_normal(shape, dtype=np.float64) * 0.02).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return TransformerParams(config, tensors)


def embed(params: TransformerParams, tokens) -> Tensor:
    return T.embedding(params["embed.weight"], tokens)


def forward(params: TransformerParams, x: Tensor, positions,
            ffn_capture: list | None = None, capture_mode: str = "pre_residual",
            head: bool = True) -> Tensor:
    """Run the backbone on pre-built embeddings [B, S, d]; returns logits [B, S, V].

    Logits at position i depend only on positions <= i. `ffn_capture`, when a
    list, receives one raw array per layer: the feed-forward block output
    before ("pre_residual") or after ("post_residual") the residual addition.
    With head=False the final-norm hidden states [B, S, d] are returned
    instead of logits (used by the output-projection ablation).
    """
    c = params.config
    if x.ndim != 3 or x.shape[2] != c.hidden_size:
        raise ValueError(f"expected embeddings [B, S, {c.hidden_size}], got {x.shape}")
    n_batch, s, d = x.shape
    if s > c.max_context:
        raise ValueError(f"sequence length {s} exceeds max_context {c.max_context}")
    if capture_mode not in ("pre_residual", "post_residual"):
        raise ValueError(f"unknown capture_mode {capture_mode!r}")
    positions = np.asarray(positions)
    heads, dh = c.n_heads, c.head_dim

    for i in range(c.n_layers):
        h = T.rmsnorm(x, params[f"layers.{i}.norm_attn.weight"], c.norm_eps)
        h2 = T.reshape(h, (n_batch * s, d))
        q = T.reshape(T.matmul(h2, params[f"layers.{i}.attn.wq"]), (n_batch, s, heads, dh))
        k = T.reshape(T.matmul(h2, params[f"layers.{i}.attn.wk"]), (n_batch, s, heads, dh))
        v = T.reshape(T.matmul(h2, params[f"layers.{i}.attn.wv"]), (n_batch, s, heads, dh))
        q = T.swapaxes(T.rope_apply(q, positions, c.rope_base), 1, 2)  # [B,H,S,dh]
        k = T.swapaxes(T.rope_apply(k, positions, c.rope_base), 1, 2)
        v = T.swapaxes(v, 1, 2)
        ctx = T.swapaxes(T.causal_attention(q, k, v), 1, 2)  # [B,S,H,dh]
        ctx = T.reshape(ctx, (n_batch * s, d))
        attn_out = T.reshape(T.matmul(ctx, params[f"layers.{i}.attn.wo"]), (n_batch, s, d))
        x = T.add(x, attn_out)

        h = T.rmsnorm(x, params[f"layers.{i}.norm_ffn.weight"], c.norm_eps)
        ffn_out = T.swiglu_ffn(h, params[f"layers.{i}.ffn.w1"],
                               params[f"layers.{i}.ffn.w3"], params[f"layers.{i}.ffn.w2"])
        x = T.add(x, ffn_out)
        if ffn_capture is not None:
            ffn_capture.append(ffn_out.data if capture_mode == "pre_residual" else x.data)

    x = T.rmsnorm(x, params["final_norm.weight"], c.norm_eps)
    if not head:
        return x
    x2 = T.reshape(x, (n_batch * s, d))
    logits = T.reshape(T.matmul(x2, params["head.weight"]), (n_batch, s, c.vocab_size))
    return logits
