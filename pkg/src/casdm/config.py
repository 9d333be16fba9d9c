"""Run configuration: nested dataclasses parsed strictly from JSON.

Every field has a default. Unknown keys anywhere raise ``ConfigError``
before any compute starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from casdm.errors import ConfigError


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    num_train: int = 500
    num_test: int = 100


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DenoiserSection:
    base_width: int = 32
    num_levels: int = 3
    time_embed_dim: int = 128
    channel_mults: list[int] | None = None
    spade_hidden: int = 16


@dataclass
class LossConfig:
    lambda_casp: float = 1.0
    casp_warmup_steps: int = 0
    weighting: str = "class"  # "class" (CAMSE) or "pixel" (plain MSE)
    clip_x0: bool = True


@dataclass
class MapgenConfig:
    embed_dim: int = 64
    max_classes: int = 16
    encoder_seed: int = 0


@dataclass
class TrainingConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    augment: bool = True


@dataclass
class SamplingConfig:
    num_inference_steps: int = 30
    batch_size: int = 50
    clip_x0: bool = True


@dataclass
class SegmenterSection:
    width: int = 16
    steps: int = 600
    batch_size: int = 16
    learning_rate: float = 2e-3


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    target_classes: list[int] = field(default_factory=lambda: [3, 4])
    extra_count: int | None = None
    ffd_seed: int = 0
    ms_ssim_scales: int | None = None
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    losses: LossConfig = field(default_factory=LossConfig)
    mapgen: MapgenConfig = field(default_factory=MapgenConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _parse(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _parse(hint, value, where)
        else:
            kwargs[key] = _coerce(hint, value, where)
    return cls(**kwargs)


def _coerce(hint, value, where):
    args = get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{where}: may not be null")
    base = [a for a in args if a is not type(None)]
    if get_origin(hint) is not list and base and get_origin(base[0]) is list:
        hint = base[0]
    elif base and get_origin(hint) is not list:
        hint = base[0]
    if get_origin(hint) is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (item,) = get_args(hint)
        return [_coerce(item, v, where) for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint}")


def config_from_dict(data: dict) -> RunConfig:
    return _parse(RunConfig, data, "")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        data = merge_overrides(data, overrides)
    return config_from_dict(data)


def merge_overrides(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = merge_overrides(out.get(k, {}), v) if isinstance(v, dict) else v
    return out
