"""Model and training hyperparameter dataclasses plus the config-file parser."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


HAN_MODES = ("none", "encoder", "decoder", "decoder_source", "decoder_alignment", "joint")

# which context-attention sites each mode activates
MODE_SITES = {
    "none": (),
    "encoder": ("enc",),
    "decoder": ("dec_target",),
    "decoder_source": ("dec_source",),
    "decoder_alignment": ("dec_alignment",),
    "joint": ("enc", "dec_target"),
}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    vocab_src: int = 1000
    vocab_tgt: int = 1000
    max_len: int = 64
    k: int = 3
    han_mode: str = "none"
    han_heads: int = 0  # 0 means "same as n_heads"
    han_residual: bool = False

    def __post_init__(self):
        if self.han_heads == 0:
            self.han_heads = self.n_heads
        if self.han_mode not in HAN_MODES:
            raise ConfigError(f"unknown han_mode {self.han_mode!r}; expected one of {HAN_MODES}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % self.han_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by han_heads={self.han_heads}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for sinusoidal positions")

    @property
    def sites(self) -> tuple[str, ...]:
        return MODE_SITES[self.han_mode]

    def structural_fields(self) -> dict:
        """Fields that must match when loading transformer weights."""
        keys = ("d_model", "n_heads", "n_layers_enc", "n_layers_dec", "d_ff",
                "vocab_src", "vocab_tgt", "max_len")
        return {k: getattr(self, k) for k in keys}


@dataclass
class TrainConfig:
    stage: int = 1
    warmup_steps: int = 400
    max_steps: int = 1000
    max_tokens_per_step: int = 800
    label_smoothing: float = 0.1
    seed: int = 1
    checkpoint_interval: int = 200
    clip_norm: float = 1.0  # 0 disables clipping
    log_interval: int = 50

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(raw: str, kind):
    if kind is bool:
        key = raw.strip().lower()
        if key not in _BOOL:
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return _BOOL[key]
    return kind(raw.strip())


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``key = value`` lines into the two config dataclasses.

    Unknown keys are an error; '#' starts a comment; blank lines ignored.
    """
    model_kinds = {f.name: f.type for f in fields(ModelConfig)}
    train_kinds = {f.name: f.type for f in fields(TrainConfig)}
    kind_of = {"int": int, "float": float, "str": str, "bool": bool}
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in model_kinds:
            model_kw[key] = _coerce(raw, kind_of[model_kinds[key]])
        elif key in train_kinds:
            train_kw[key] = _coerce(raw, kind_of[train_kinds[key]])
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
