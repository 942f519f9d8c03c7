"""Plain-text run configuration: one `section.key = value` per line.

Sections: model.*, patch.*, train.*, data.*. Values are parsed as bool, int,
fraction (`2/3`, kept exact), float, or string. `#` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .model import ModelConfig
from .patching import PatchConfig

__all__ = ["TrainConfig", "DataConfig", "RunConfig", "parse_config", "load_config", "config_from_pairs"]


@dataclass
class TrainConfig:
    steps: int | None = None
    epochs: int | None = None
    tokens_per_batch: int = 8192
    lr: float = 3e-4
    warmup: int = 2000
    floor_fraction: float = 0.1
    weight_decay: float = 0.1
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    log_interval: int = 50
    eval_fraction: float = 0.0
    eval_interval: int = 0
    eval_blocks: int = 64
    checkpoint_interval: int = 0
    log_wall_time: bool = True
    data_mode: str = "split"  # "split": token stage skips what stage one consumed; "reuse": both cycle from scratch

    def __post_init__(self):
        if (self.steps is None) == (self.epochs is None):
            raise ValueError("set exactly one of train.steps or train.epochs")
        if self.data_mode not in ("split", "reuse"):
            raise ValueError(f"unknown data_mode {self.data_mode!r}")
        if self.tokens_per_batch < 1:
            raise ValueError("tokens_per_batch must be >= 1")


@dataclass
class DataConfig:
    path: str = ""
    kind: str = "byte"


@dataclass
class RunConfig:
    model: ModelConfig
    patch: PatchConfig
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    if "/" in raw:
        num, _, den = raw.partition("/")
        try:
            return Fraction(int(num), int(den))
        except ValueError:
            pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_config(text: str) -> dict[tuple[str, str], object]:
    """Raw `(section, key) -> value` pairs from config text."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.key = value'")
        name, _, raw = line.partition("=")
        name = name.strip()
        if "." not in name:
            raise ValueError(f"line {lineno}: key {name!r} lacks a section prefix")
        section, _, key = name.partition(".")
        pairs[(section, key)] = _parse_value(raw)
    return pairs


_PATCH_KEYS = {
    "K": "patch_size",
    "patch_size": "patch_size",
    "lambda": "lam",
    "context_tokens": "context_tokens",
    "context_mode": "patch_context_mode",
    "strategy": "strategy",
    "input_proj": "input_proj_enabled",
    "output_proj": "output_proj_enabled",
}

_MODEL_KEYS = ("vocab_size", "hidden_size", "intermediate_size", "n_layers",
               "n_heads", "max_context", "rope_base", "norm_eps")


def config_from_pairs(pairs: dict[tuple[str, str], object]) -> RunConfig:
    pairs = dict(pairs)

    patch_kwargs = {}
    for key, attr in _PATCH_KEYS.items():
        if ("patch", key) in pairs:
            patch_kwargs[attr] = pairs.pop(("patch", key))
    if "lam" in patch_kwargs:
        lam = patch_kwargs["lam"]
        patch_kwargs["lam"] = lam if isinstance(lam, Fraction) else Fraction(str(lam))
    patch = PatchConfig(**patch_kwargs)

    model_kwargs = {}
    for key in _MODEL_KEYS:
        if ("model", key) in pairs:
            model_kwargs[key] = pairs.pop(("model", key))
    model_kwargs.setdefault("vocab_size", 256)
    if "max_context" not in model_kwargs:
        model_kwargs["max_context"] = patch.patch_size * patch.context_tokens
    model = ModelConfig(**model_kwargs)

    train_kwargs = {}
    for f in TrainConfig.__dataclass_fields__:
        if ("train", f) in pairs:
            train_kwargs[f] = pairs.pop(("train", f))
    train = TrainConfig(**train_kwargs)

    data_kwargs = {}
    for f in DataConfig.__dataclass_fields__:
        if ("data", f) in pairs:
            data_kwargs[f] = pairs.pop(("data", f))
    data = DataConfig(**data_kwargs)

    if pairs:
        unknown = ", ".join(f"{s}.{k}" for s, k in sorted(pairs))
        raise ValueError(f"unknown config keys: {unknown}")
    return RunConfig(model=model, patch=patch, train=train, data=data)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_pairs(parse_config(f.read()))
