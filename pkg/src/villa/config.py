"""Run configuration: nested dataclasses with strict JSON round-tripping."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .bench import PAPER_RATIOS, GeneratorConfig
from .context import CAMConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .reasoning import ResponderConfig
from .supervision import LossWeights, OptimizerConfig


@dataclass
class DataConfig:
    episodes: int = 80
    ratios: tuple[float, float, float] = PAPER_RATIOS
    seed: int = 0


@dataclass
class AblationConfig:
    cam_on: bool = True
    vfdec_on: bool = True
    aggregation_strategy: Optional[str] = None
    scale_count: Optional[int] = None
    residual_in_eq1: Optional[bool] = None
    score_strategy: Optional[str] = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cam: CAMConfig = field(default_factory=CAMConfig)
    responder: ResponderConfig = field(default_factory=ResponderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    max_iters: int = 200
    batch_size: int = 4
    save_every: int = 0
    seed: int = 0

    def resolved(self) -> "RunConfig":
        """Copy with ablation toggles pushed into the module configs."""
        cfg = copy.deepcopy(self)
        ab = cfg.ablation
        cfg.decoder.frame_branch = ab.vfdec_on
        if ab.aggregation_strategy is not None:
            cfg.decoder.aggregation = ab.aggregation_strategy
        if ab.scale_count is not None:
            cfg.decoder.layers = ab.scale_count
        if ab.residual_in_eq1 is not None:
            cfg.cam.residual = ab.residual_in_eq1
        if ab.score_strategy is not None:
            cfg.cam.score = ab.score_strategy
        cfg.decoder.width = cfg.encoder.channels
        return cfg

    def validate(self) -> "RunConfig":
        cfg = self.resolved()
        cfg.encoder.validate()
        cfg.cam.validate()
        cfg.responder.validate()
        cfg.decoder.validate(cfg.encoder.scales)
        cfg.losses.validate()
        cfg.optimizer.validate()
        cfg.generator.validate()
        if self.max_iters < 0 or self.batch_size < 1:
            raise ConfigError("max_iters must be >= 0 and batch_size >= 1")
        return cfg

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(RunConfig, data)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


ABLATION_KEYS = {f.name for f in dataclasses.fields(AblationConfig)}


def apply_ablation(cfg: RunConfig, spec: str) -> RunConfig:
    """Apply one ``KEY=VAL`` toggle; values are parsed as JSON, falling back to strings."""
    if "=" not in spec:
        raise ConfigError(f"ablation must look like KEY=VAL, got {spec!r}")
    key, raw = spec.split("=", 1)
    key = key.strip()
    if key not in ABLATION_KEYS:
        raise ConfigError(f"unknown ablation key {key!r}; choose from {sorted(ABLATION_KEYS)}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    hints = typing.get_type_hints(AblationConfig)
    cfg = copy.deepcopy(cfg)
    setattr(cfg.ablation, key, _convert(hints[key], value, f"ablation.{key}"))
    return cfg
