"""Flat ``key = value`` run configuration with command-line overrides.

Blank lines and ``#`` comments are ignored. Every key has a default; an
unknown key is an error. List values are comma separated.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import TMAError
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(TMAError, ValueError):
    pass


@dataclass
class RunConfig:
    # model
    memory_length: int = 2
    key_channels: int = 8
    value_channels: int = 0  # 0 means 4 * key_channels
    num_classes: int = 4
    backbone_widths: tuple[int, ...] = (8, 16, 32)
    backbone_strides: tuple[int, ...] = (2, 2, 4)
    aggregation: str = "concat"
    attention_scaling: str = "none"
    encoder: str = "1x1+3x3"
    aux_loss_weight: float = 0.4
    # training
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_iters: int = 500
    poly_power: float = 0.9
    batch_size: int = 2
    seed: int = 0
    sampler: str = "random"
    window: int = 10
    augment: bool = True
    resize_min: float = 0.5
    resize_max: float = 2.0
    crop: int = 32
    hflip_prob: float = 0.5

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            memory_length=self.memory_length,
            key_channels=self.key_channels,
            value_channels=self.value_channels or None,
            num_classes=self.num_classes,
            backbone_widths=self.backbone_widths,
            backbone_strides=self.backbone_strides,
            aggregation=self.aggregation,
            attention_scaling=self.attention_scaling,
            encoder=self.encoder,
            aux_loss_weight=self.aux_loss_weight,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            total_iters=self.total_iters,
            poly_power=self.poly_power,
            batch_size=self.batch_size,
            seed=self.seed,
            sampler=self.sampler,
            window=self.window,
            augment=self.augment,
            resize_min=self.resize_min,
            resize_max=self.resize_max,
            crop=self.crop,
            hflip_prob=self.hflip_prob,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = asdict(RunConfig())


def _coerce(key: str, raw: str):
    default = _DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_pairs(lines, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None, env=None) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` overrides, then TMA_SEED."""
    values = {}
    if path is not None:
        values.update(parse_pairs(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_pairs(overrides or [], "<command line>"))
    env = os.environ if env is None else env
    if env.get("TMA_SEED"):
        values["seed"] = _coerce("seed", env["TMA_SEED"])
    return RunConfig(**values)
