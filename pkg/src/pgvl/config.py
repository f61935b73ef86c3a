"""Run configuration: one JSON document with nested sections.

Unknown keys are rejected.  Errors carry the line of the offending key so
the CLI can point at it.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field, fields
from typing import Any, get_args, get_origin, get_type_hints

from .harness import LossConfig, TrainConfig
from .model import ARCHITECTURES, ModelSpec
from .synthetic import SceneConfig
from .variants import VariantSpec


class ConfigFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class FusionConfig:
    G: tuple[int, ...] = (2, 2, 2)
    D: tuple[int, ...] = (512,)
    heads: int = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    sigma_init: float = 0.02
    sigma_pos: float = 0.02
    sigma_embed: float = 1.0
    position: str = "sinusoidal"


@dataclass(frozen=True)
class SceneSection:
    height: int = 16
    width: int = 16
    joints: tuple[str, ...] = SceneConfig.joints
    in_channels: int = 8
    rotation_deg: float = 25.0
    scale_min: float = 0.8
    scale_max: float = 1.15
    shift: float = 2.0
    joint_jitter: float = 0.3
    sigma_render: float = 0.8
    noise_std: float = 0.05
    p_occ: float = 0.5
    occ_min: int = 4
    occ_max: int = 7


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    architecture: str = "full"
    scene: SceneSection = field(default_factory=SceneSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def scene_config(self, seed: int | None = None) -> SceneConfig:
        return SceneConfig(**dataclasses.asdict(self.scene), seed=self.seed if seed is None else seed)

    def model_spec(self, architecture: str | None = None) -> ModelSpec:
        return ModelSpec(self.scene_config(), channels=self.model.channels, branching=self.fusion.G,
                         dims=self.fusion.D, architecture=architecture or self.architecture,
                         heads=self.fusion.heads, sigma_init=self.model.sigma_init, sigma_pos=self.model.sigma_pos,
                         sigma_embed=self.model.sigma_embed, position=self.model.position)

    def variant_spec(self) -> VariantSpec:
        return VariantSpec(self.fusion.D, self.fusion.G)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=seed)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _line_of(text: str, path: list[str]) -> int | None:
    """Best-effort line number of the last key in ``path``."""
    pos = 0
    line = None
    for key in path:
        m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, pos)
        if m is None:
            return line
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _coerce(value: Any, hint, where: str):
    origin = get_origin(hint)
    if origin is tuple:
        if not isinstance(value, list):
            raise TypeError(f"{where} must be a list")
        inner = get_args(hint)[0]
        return tuple(_coerce(v, inner, where) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise TypeError(f"{where} must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{where} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{where} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise TypeError(f"{where} must be a string")
        return value
    return value


def _build(cls, data: dict, text: str, path: list[str]):
    if not isinstance(data, dict):
        raise ConfigFileError(f"{'.'.join(path) or 'config'} must be an object", _line_of(text, path))
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = ".".join(path + [key])
        if key not in names:
            raise ConfigFileError(f"unknown key {where!r}", _line_of(text, path + [key]))
        hint = hints[key]
        try:
            if dataclasses.is_dataclass(hint):
                kwargs[key] = _build(hint, value, text, path + [key])
            else:
                kwargs[key] = _coerce(value, hint, where)
        except TypeError as exc:
            raise ConfigFileError(str(exc), _line_of(text, path + [key])) from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{'.'.join(path) or 'config'}: {exc}", _line_of(text, path)) from None


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigFileError(exc.msg, exc.lineno) from None
    cfg = _build(RunConfig, data, text, [])
    validate(cfg, text)
    return cfg


def validate(cfg: RunConfig, text: str = "") -> None:
    if cfg.architecture not in ARCHITECTURES:
        raise ConfigFileError(f"architecture must be one of {ARCHITECTURES}", _line_of(text, ["architecture"]))
    if cfg.loss.sampling not in ("nearest", "bilinear"):
        raise ConfigFileError("loss.sampling must be 'nearest' or 'bilinear'", _line_of(text, ["loss", "sampling"]))
    try:
        cfg.variant_spec()
        cfg.scene_config()
    except ValueError as exc:
        raise ConfigFileError(str(exc), _line_of(text, ["fusion"])) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_from_dict(data: dict) -> RunConfig:
    return parse_config(json.dumps(data))
