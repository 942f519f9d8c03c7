"""Binary checkpoint format, byte-exact on round trip.

Layout (all little-endian):

    magic "PLMC" | u32 version
    model header: u32 vocab, hidden, intermediate, n_layers, n_heads,
                  max_context | f64 rope_base | f64 norm_eps
    patch header: u32 patch_size | u64 lambda_num | u64 lambda_den |
                  u32 context_tokens | u8 context_mode | u8 strategy |
                  u8 input_proj | u8 output_proj
    u32 tensor_count
    per tensor:   u32 name_len | name utf8 | u32 rank | u32 dims[rank] |
                  raw float32 data

Stage-one projection tensors are stored under the reserved "aux." prefix so
the stage-two transfer can drop them by name alone. Tensor data is always
written as float32.
"""

from __future__ import annotations

import struct
from fractions import Fraction

import numpy as np

from .model import ModelConfig, TransformerParams, _param_names
from .patching import AuxProjections, PatchConfig
from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"PLMC"
FORMAT_VERSION = 1

_MODES = ["full", "reduced"]
_STRATEGIES = ["consecutive", "mixup"]


def _write_tensor(f, name: str, data: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
    return name, np.ascontiguousarray(data)


def save_checkpoint(path, params: TransformerParams,
                    patch: PatchConfig, aux: AuxProjections | None = None) -> None:
    c = params.config
    entries = list(params.named())
    if aux is not None:
        entries += aux.named()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<6I", c.vocab_size, c.hidden_size, c.intermediate_size,
                            c.n_layers, c.n_heads, c.max_context))
        f.write(struct.pack("<2d", c.rope_base, c.norm_eps))
        f.write(struct.pack("<IQQI", patch.patch_size,
                            patch.lam.numerator, patch.lam.denominator,
                            patch.context_tokens))
        f.write(struct.pack("<4B", _MODES.index(patch.patch_context_mode),
                            _STRATEGIES.index(patch.strategy),
                            int(patch.input_proj_enabled), int(patch.output_proj_enabled)))
        f.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            _write_tensor(f, name, t.data)


def load_checkpoint(path) -> tuple[TransformerParams, PatchConfig, AuxProjections | None]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        vocab, hidden, inter, layers, heads, max_ctx = struct.unpack("<6I", _read_exact(f, 24))
        rope_base, norm_eps = struct.unpack("<2d", _read_exact(f, 16))
        k, lam_num, lam_den, ctx_tokens = struct.unpack("<IQQI", _read_exact(f, 24))
        mode_i, strat_i, in_proj, out_proj = struct.unpack("<4B", _read_exact(f, 4))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = dict(_read_tensor(f) for _ in range(count))

    config = ModelConfig(vocab, hidden, inter, layers, heads, max_ctx, rope_base, norm_eps)
    patch = PatchConfig(k, Fraction(lam_num, lam_den), ctx_tokens,
                        _MODES[mode_i], _STRATEGIES[strat_i], bool(in_proj), bool(out_proj))
    backbone = {}
    for name in _param_names(config):
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        backbone[name] = Tensor(tensors.pop(name), requires_grad=True)
    aux = None
    if tensors:
        w_in = tensors.pop("aux.w_in", None)
        w_out = tensors.pop("aux.w_out", None)
        if tensors:
            raise ValueError(f"{path}: unrecognized tensors {sorted(tensors)}")
        aux = AuxProjections(
            w_in=Tensor(w_in, requires_grad=True) if w_in is not None else None,
            w_out=Tensor(w_out, requires_grad=True) if w_out is not None else None,
        )
    return TransformerParams(config, backbone), patch, aux
