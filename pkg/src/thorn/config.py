"""Experiment configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import tomli


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    architecture: str = "thorn"  # thorn | baseline
    node_mode: str = "spatio_temporal"  # spatio_temporal | temporal
    verb_head: str = "adjacency"  # adjacency | nodes
    num_objects: int = 10
    num_verbs: int = 6
    input_size: int = 56
    grid_size: int = 7  # required encoder grid side; 0 accepts whatever input_size gives
    d1: int = 432
    d_global: int = 256
    d2: int = 128
    d_e: int = 32
    heads: int = 3
    n_blocks: int = 5
    tcn_kernel: int = 9
    dropout: float = 0.3
    share_base: bool = False
    shared_classifier: bool = False
    strict_eq3: bool = False
    attention_scale: bool = True
    attention_norm: bool = True
    verb_init_gain: float = 30.0
    lr: float = 5e-5
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    epochs: int = 30
    max_steps: int = 0
    batch_size: int = 8
    seed: int = 0
    fusion_threshold: float = 0.3
    pseudo_label_threshold: float = 0.5
    eval_train: bool = True
    augment: str = "none"  # none | dihedral | dihedral_shift

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {
            "architecture": ("thorn", "baseline"),
            "node_mode": ("spatio_temporal", "temporal"),
            "verb_head": ("adjacency", "nodes"),
            "augment": ("none", "dihedral", "dihedral_shift"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in (
            "num_objects", "num_verbs", "input_size", "d1", "d_global", "d2", "d_e",
            "heads", "n_blocks", "tcn_kernel", "epochs", "batch_size", "scheduler_patience",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.tcn_kernel % 2 == 0:
            raise ConfigError(f"tcn_kernel must be odd, got {self.tcn_kernel}")
        if self.verb_init_gain <= 0:
            raise ConfigError(f"verb_init_gain must be positive, got {self.verb_init_gain}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.grid_size < 0:
            raise ConfigError(f"grid_size must be >= 0, got {self.grid_size}")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip < 0 or self.max_steps < 0:
            raise ConfigError("lr, weight_decay, grad_clip and max_steps must be non-negative")
        if not 0.0 < self.scheduler_factor <= 1.0:
            raise ConfigError(f"scheduler_factor must be in (0, 1], got {self.scheduler_factor}")
        for key in ("fusion_threshold", "pseudo_label_threshold"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must be in [0, 1], got {getattr(self, key)}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**coerce_fields(cls, data))


def coerce_fields(cls, data: dict) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat; {key!r} is a table")
        kind = type(known[key].default)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not type(value):
            raise ConfigError(f"{key} expects {kind.__name__}, got {type(value).__name__}")
        out[key] = value
    return out


def read_flat_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: config must be flat; {key!r} is a table")
    return data


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Read a config file; ``THORN_SEED`` then explicit overrides take precedence."""
    data = read_flat_toml(path) if path is not None else {}
    env_seed = os.environ.get("THORN_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"THORN_SEED must be an integer, got {env_seed!r}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def write_flat_toml(values: dict, path: str | Path) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    Path(path).write_text("\n".join(lines) + "\n")
