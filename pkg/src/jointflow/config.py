"""``key = value`` configuration files for model and training settings."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .model import ModelConfig

DEFAULT_STEPS = {"base": 8000, "joint": 5000}


@dataclass
class TrainConfig:
    phase: str = "base"
    steps: Optional[int] = None  # None: 8000 for base, 5000 for joint
    batch_size: int = 32
    learning_rate: float = 1e-3
    condition_drop_prob: float = 0.10
    seed: int = 0
    eval_every: int = 500
    checkpoint_path: str = ""
    adaptive_weights_enabled: bool = True
    unbalanced_sampling_enabled: bool = True
    n_train: int = 2000
    n_val: int = 200

    def __post_init__(self):
        if self.phase not in DEFAULT_STEPS:
            raise ValueError(f"phase must be 'base' or 'joint', got {self.phase!r}")
        if self.steps is None:
            self.steps = DEFAULT_STEPS[self.phase]
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")
        if not 0.0 <= self.condition_drop_prob <= 1.0:
            raise ValueError("condition_drop_prob must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


class ConfigError(ValueError):
    pass


# adaptive_weights on the model is driven by the training toggle
_MODEL_KEYS = {f.name: f for f in fields(ModelConfig) if f.name != "adaptive_weights"}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_TYPES = {
    "image_size": int, "patch": int, "d_model": int, "heads": int, "mm_blocks": int,
    "p_blocks": int, "lora_rank": int, "lora_alpha": float, "alpha_schedule": float,
    "num_classes": int, "phase": str, "steps": int, "batch_size": int,
    "learning_rate": float, "condition_drop_prob": float, "seed": int, "eval_every": int,
    "checkpoint_path": str, "adaptive_weights_enabled": bool,
    "unbalanced_sampling_enabled": bool, "n_train": int, "n_val": int,
}
KNOWN_KEYS = tuple(_TYPES)


def convert(key: str, raw: str):
    typ = _TYPES[key]
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return typ(raw)


def parse_pairs(text: str) -> dict:
    """Parse lines into a typed ``{key: value}`` dict (comments and blanks skipped)."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = convert(key, raw)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from None
    return out


def build_configs(values: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        mcfg = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
        tcfg = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    mcfg.adaptive_weights = tcfg.adaptive_weights_enabled
    return mcfg, tcfg


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    return build_configs(parse_pairs(text))
