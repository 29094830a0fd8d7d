"""Run configuration: defaults, validation, file/override merging."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from cool.errors import ConfigError

ACTIVATIONS = ("relu", "tanh", "identity")

# smoke-test presets applied before file/flag overrides
PROFILES: dict[str, dict[str, Any]] = {
    "tiny": {"d": 16, "prior_layers": 2, "epochs": 5},
}


@dataclass
class TrainConfig:
    d: int = 64
    prior_layers: int = 6
    ranks: tuple[int, ...] = (3, 4, 6)
    windows: tuple[int, ...] = (3, 4, 6)
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    beta: float = 1.0
    input_steps: int = 12
    output_steps: int = 12
    seed: int = 0
    use_prior: bool = True
    use_posterior: bool = True
    use_multi_rank: bool = True
    use_multi_scale: bool = True
    grad_clip: float | None = 5.0
    activation: str = "relu"
    head_hidden: int | None = None       # None: same as d
    sentinel: float | None = 0.0
    train_stride: int = 1
    eval_stride: int | None = None       # None: output_steps (non-overlapping)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    temporal_bidirectional: bool = False
    top_k: int | None = None             # None: dense affinity/penalty matrices
    mape_floor: float = 1e-3
    early_stop_patience: int | None = None

    def validated(self) -> "TrainConfig":
        for mu in self.ranks:
            if self.input_steps % mu != 0:
                raise ConfigError(
                    f"input_steps={self.input_steps} is not divisible by rank {mu}; "
                    "every rank and window must divide input_steps"
                )
        for eps in self.windows:
            if self.input_steps % eps != 0:
                raise ConfigError(
                    f"input_steps={self.input_steps} is not divisible by window {eps}; "
                    "every rank and window must divide input_steps"
                )
        if not self.ranks and self.use_multi_rank:
            raise ConfigError("ranks must be non-empty while the multi-rank branch is on")
        if not self.windows and self.use_multi_scale:
            raise ConfigError("windows must be non-empty while the multi-scale branch is on")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.prior_layers < 0:
            raise ConfigError("prior_layers must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.input_steps < 1 or self.output_steps < 1:
            raise ConfigError("input_steps and output_steps must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if not self.use_multi_rank and not self.use_multi_scale:
            raise ConfigError(
                "multi_rank and multi_scale cannot both be ablated: "
                "no embedding would reach the fusion stage"
            )
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.train_stride < 1:
            raise ConfigError("train_stride must be >= 1")
        if len(self.split) != 3:
            raise ConfigError("split needs three ratios")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_TUPLE_FIELDS = {"ranks": int, "windows": int, "split": float}


def _coerce(name: str, value: Any) -> Any:
    if isinstance(value, str):
        # values arriving via --set key=value are raw strings
        value = yaml.safe_load(value)
    if name in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return tuple(_TUPLE_FIELDS[name](v) for v in value)
    return value


def config_from_mapping(mapping: Mapping[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    """Overlay a flat mapping (from a YAML file or --set flags) on a base config."""
    cfg = dataclasses.replace(base) if base else TrainConfig()
    unknown = [k for k in mapping if k not in _FIELDS]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    updates = {name: _coerce(name, value) for name, value in mapping.items()}
    return dataclasses.replace(cfg, **updates)


def load_config_file(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat key-value mapping")
    return config_from_mapping(raw, base)


def parse_set_overrides(pairs: list[str]) -> dict[str, Any]:
    """Parse repeated --set key=value flags into a mapping."""
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    """JSON-friendly view (tuples become lists)."""
    d = dataclasses.asdict(cfg)
    for name in _TUPLE_FIELDS:
        d[name] = list(d[name])
    return d
