"""Run configuration: a JSON document naming inputs, outputs and training overrides."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from . import checkpoint as ckpt
from .errors import ConfigError
from .trainer import TrainConfig

PRESETS = ("full", "desk")

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scene", "out_dir"],
    "properties": {
        "version": {"const": 1},
        "scene": {"type": "string"},
        "styles": {"type": ["string", "null"]},
        "stage": {"enum": [1, 2]},
        "out_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "device": {"enum": ["cpu", "cuda"]},
        "preset": {"enum": list(PRESETS)},
        "overrides": {"type": "object"},
        "holdout": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "style_test_count": {"type": "integer", "minimum": 0},
        "vgg_weights": {"type": ["string", "null"]},
    },
}


@dataclass(frozen=True)
class RunConfig:
    scene: str
    out_dir: str
    styles: Optional[str] = None
    stage: int = 1
    seed: int = 0
    device: str = "cpu"
    preset: str = "desk"
    overrides: dict = field(default_factory=dict)
    holdout: tuple = ()
    style_test_count: int = 112
    vgg_weights: Optional[str] = None
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "holdout", tuple(int(i) for i in self.holdout))
        validate_run_config(self.to_dict())
        self.train_config()

    def train_config(self) -> TrainConfig:
        """Effective training hyperparameters (preset, then overrides, then seed)."""
        overrides = dict(self.overrides)
        overrides["seed"] = self.seed
        try:
            if self.preset == "desk":
                base = TrainConfig.desk().to_dict()
            else:
                base = TrainConfig().to_dict()
            unknown = set(overrides) - set(base)
            if unknown:
                raise ConfigError(f"unknown training override keys: {sorted(unknown)}")
            for key, value in overrides.items():
                if isinstance(base[key], dict) and isinstance(value, dict):
                    merged = dict(base[key])
                    unknown = set(value) - set(merged)
                    if unknown:
                        raise ConfigError(f"unknown keys under {key!r}: {sorted(unknown)}")
                    merged.update(value)
                    base[key] = merged
                else:
                    base[key] = value
            return TrainConfig.from_dict(base)
        except TypeError as exc:
            raise ConfigError(f"invalid training overrides: {exc}") from exc

    def to_dict(self):
        d = asdict(self)
        d["holdout"] = list(self.holdout)
        return d

    @classmethod
    def from_dict(cls, d):
        validate_run_config(d)
        return cls(**d)

    @property
    def hash(self):
        return ckpt.stable_hash(self.to_dict())

    def effective(self):
        """The run config plus the fully resolved training config."""
        return {**self.to_dict(), "train_config": self.train_config().to_dict(), "config_hash": self.hash}


def validate_run_config(d):
    try:
        jsonschema.validate(d, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"run config: {exc.message}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict) and "train_config" in data:
        data = {k: v for k, v in data.items() if k not in ("train_config", "config_hash")}
    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, path, effective=True):
    """Write the config; the effective form also records the resolved training
    config and hash and loads back to the same :class:`RunConfig`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.effective() if effective else config.to_dict(), indent=2))
    return path
