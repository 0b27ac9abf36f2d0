"""Toolkit configuration: feature extraction, loss weights, model dims, training.

The on-disk form is a YAML mapping with one section per dataclass below plus
a top-level ``mode``. Unknown keys are rejected at every level.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    win: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    f0_min: float = 50.0
    f0_max: float = 600.0
    voicing_threshold: float = 0.15
    log_floor: float = 1e-5
    # "log" averages the stored log-mel values, "linear" averages mel magnitudes
    energy_domain: str = "log"
    f0_std_floor: float = 1.0

    def validate(self) -> None:
        if self.sample_rate <= 0 or self.win <= 0 or self.hop <= 0 or self.n_mels <= 0:
            raise ConfigError("sample_rate, win, hop and n_mels must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate/2")
        if not 0 < self.f0_min < self.f0_max:
            raise ConfigError("need 0 < f0_min < f0_max")
        if math.ceil(self.sample_rate / self.f0_min) + 2 >= self.win:
            raise ConfigError("win must exceed the longest f0 period (sample_rate / f0_min)")
        if self.energy_domain not in ("log", "linear"):
            raise ConfigError("energy_domain must be 'log' or 'linear'")
        if self.log_floor <= 0 or self.f0_std_floor <= 0:
            raise ConfigError("log_floor and f0_std_floor must be positive")

    def digest(self) -> str:
        """Stable hash identifying this feature configuration."""
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LossWeights:
    w_var: float = 10.0
    w_covar: float = 10.0
    w_xcorr: float = 10.0
    w_adv: float = 0.0
    gamma: float = 1.0
    epsilon: float = 1e-4
    grl_lambda: float = 1.0

    def validate(self) -> None:
        for name in ("w_var", "w_covar", "w_xcorr", "w_adv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class ModelConfig:
    c_txt: int = 16
    d_accent: int = 4
    d_speaker: int = 4
    n_flow_steps: int = 6
    hidden: int = 16
    d_att: int = 8
    prior_scaling: float = 1.0
    prior_fraction: float = 0.5
    standardize_f0: bool = True
    adv_pooling: str = "mean"

    def validate(self) -> None:
        for name in ("c_txt", "d_accent", "d_speaker", "hidden", "d_att"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_flow_steps < 0:
            raise ConfigError("n_flow_steps must be >= 0")
        if not 0.0 <= self.prior_fraction <= 1.0:
            raise ConfigError("prior_fraction must lie in [0, 1]")
        if self.adv_pooling not in ("mean", "token"):
            raise ConfigError("adv_pooling must be 'mean' or 'token'")


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    lr: float = 3e-3
    batch_size: int = 4
    steps: int = 200
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and lr > 0 required")


@dataclass(frozen=True)
class ToolkitConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    mode: str = "rm"

    def validate(self) -> None:
        self.features.validate()
        self.losses.validate()
        self.model.validate()
        self.training.validate()
        if self.mode not in ("rt", "rm"):
            raise ConfigError("mode must be 'rt' or 'rm'")
        if self.losses.w_xcorr > 0 and self.training.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when w_xcorr > 0 (cross-correlation divides by B-1)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolkitConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        sections = {"features": FeatureConfig, "losses": LossWeights, "model": ModelConfig, "training": TrainingConfig}
        unknown = set(data) - set(sections) - {"mode"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, klass in sections.items():
            if name in data:
                kwargs[name] = _build_section(klass, data[name] or {}, name)
        if "mode" in data:
            kwargs["mode"] = str(data["mode"]).lower()
        config = cls(**kwargs)
        config.validate()
        return config


def _build_section(klass, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(klass)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    out = {}
    for key, value in values.items():
        default = fields[key].default
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise TypeError
                out[key] = value
            elif isinstance(default, int):
                if isinstance(value, bool) or int(value) != value:
                    raise TypeError
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            else:
                out[key] = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {section}.{key}: {value!r}") from None
    return klass(**out)


def load_config(path: str | Path | None) -> ToolkitConfig:
    if path is None:
        config = ToolkitConfig()
        config.validate()
        return config
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return ToolkitConfig.from_dict(data)


def dump_config(config: ToolkitConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: ToolkitConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")

