"""Run configuration: defaults, ``key = value`` files and CLI overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import KL_MODES, VARIANCE_LINKS, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 60
    learning_rate: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    d_z: int = 16
    hidden: int = 64
    hidden_layers: int = 2
    kappa: int = 0
    budget_fraction: float = 0.15
    segment_length: int = 2
    k_splits: int = 5
    train_fraction: float = 0.8
    single_stage: bool = False
    kl_mode: str = "analytic"
    variance_link: str = "exp"
    helper_stop_gradient: bool = True
    weak_supervision: bool = False
    multimodal: bool = False
    d_model: int = 32
    d_attn: int = 32
    d_fused: int = 64
    effect_samples: int = 20
    threads: int = 1

    def __post_init__(self):
        positive = ("batch_size", "d_z", "hidden", "segment_length", "effect_samples", "threads", "k_splits")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.hidden_layers < 0 or self.kappa < 0:
            raise ConfigError("epochs, hidden_layers and kappa must be >= 0")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.budget_fraction <= 1:
            raise ConfigError("budget_fraction must lie in [0, 1]")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.kl_mode not in KL_MODES:
            raise ConfigError(f"kl_mode must be one of {KL_MODES}")
        if self.variance_link not in VARIANCE_LINKS:
            raise ConfigError(f"variance_link must be one of {VARIANCE_LINKS}")
        if min(self.d_model, self.d_attn) < 2 or self.d_fused < 1:
            raise ConfigError("attention widths must be >= 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def model_config(self, d_v: int, n_classes: int, vocab_size: int, max_query_len: int) -> ModelConfig:
        return ModelConfig(
            d_v=d_v,
            n_classes=n_classes,
            d_z=self.d_z,
            hidden=self.hidden,
            hidden_layers=self.hidden_layers,
            variance_link=self.variance_link,
            kl_mode=self.kl_mode,
            helper_stop_gradient=self.helper_stop_gradient,
            multimodal=self.multimodal,
            vocab_size=vocab_size,
            max_query_len=max_query_len,
            d_model=self.d_model,
            d_attn=self.d_attn,
            d_fused=self.d_fused,
            kappa=self.kappa,
            single_stage=self.single_stage,
        )


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key} ({kind.__name__})") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def build_run_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    values = read_config_file(file_path) if file_path else {}
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    return RunConfig(**values)
