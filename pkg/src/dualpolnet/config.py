"""Model and training configuration.

Both configs are flat dataclasses loadable from one flat JSON document;
unknown keys are rejected so a typo never silently falls back to a
default. The single ``seed`` key feeds both configs (every random
stream in a run derives from it by name).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError

BRANCHES = ("i1", "i2", "i3")
FUSIONS = ("concat", "add")


@dataclass
class ModelConfig:
    """Architecture switches; the defaults describe the full model."""

    enable_i1: bool = True
    enable_i2: bool = True
    enable_i3: bool = True
    enable_cross_attention: bool = True
    enable_sa_module: bool = True
    enable_drdb: bool = True
    enable_global_residual: bool = True
    n_drdb: int = 3
    main_branch: str = "i2"
    fusion: str = "concat"
    classes: int = 6
    input_size: int = 256
    base_width: int = 8     # stage widths are base_width * (1, 2, 4, 8)
    fc1_width: int = 1024
    seed: int = 0

    def enabled_branches(self) -> list[str]:
        return [b for b, on in zip(BRANCHES, (self.enable_i1, self.enable_i2, self.enable_i3)) if on]

    def stage_widths(self) -> list[int]:
        return [self.base_width * m for m in (1, 2, 4, 8)]

    def feature_width(self) -> int:
        """Channel width of every 16x16-scale feature (encoder terminal)."""
        return self.base_width * 8

    def feature_size(self) -> int:
        """Spatial extent after the four pooling stages."""
        return self.input_size // 16

    def fused_width(self) -> int:
        if self.fusion == "add":
            return self.feature_width()
        return self.feature_width() * len(self.enabled_branches())

    def validate(self) -> None:
        enabled = self.enabled_branches()
        if not enabled:
            raise ConfigError("at least one input branch must be enabled")
        if self.main_branch not in BRANCHES:
            raise ConfigError(f"main_branch must be one of {BRANCHES}, got {self.main_branch!r}")
        if self.main_branch not in enabled:
            raise ConfigError(f"main_branch {self.main_branch!r} is not an enabled branch")
        if not 1 <= self.n_drdb <= 5:
            raise ConfigError(f"n_drdb must be in [1, 5], got {self.n_drdb}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.base_width < 1 or self.fc1_width < 1:
            raise ConfigError("base_width and fc1_width must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
VALID_KEYS = sorted(_MODEL_KEYS | _TRAIN_KEYS)
_DEFAULTS = {**dataclasses.asdict(TrainConfig()), **dataclasses.asdict(ModelConfig())}


def _check_type(key: str, value):
    default = _DEFAULTS[key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"config key {key!r} must be a {type(default).__name__}, got {value!r}")


def configs_from_flat(doc: dict) -> tuple[ModelConfig, TrainConfig]:
    """Build both configs from one flat mapping; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(doc) - set(VALID_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {VALID_KEYS}")
    for key, value in doc.items():
        _check_type(key, value)
    mcfg = ModelConfig(**{k: v for k, v in doc.items() if k in _MODEL_KEYS})
    tcfg = TrainConfig(**{k: float(v) if k == "lr" else v for k, v in doc.items() if k in _TRAIN_KEYS})
    mcfg.validate()
    tcfg.validate()
    return mcfg, tcfg


def flat_from_configs(mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    doc = dataclasses.asdict(tcfg)
    doc.update(dataclasses.asdict(mcfg))  # shared 'seed' key: one root seed
    return {k: doc[k] for k in VALID_KEYS}


def load_config_file(path: str | None, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Merge defaults <- JSON file <- overrides, then validate."""
    doc: dict = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        doc.update(loaded)
    if overrides:
        doc.update(overrides)
    return configs_from_flat(doc)
