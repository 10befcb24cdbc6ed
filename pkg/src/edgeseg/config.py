"""Configuration dataclasses and JSON loading with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    enc_channels: tuple = (32, 64, 160, 256)
    enc_depths: tuple = (2, 2, 2, 2)
    enc_heads: tuple = (1, 2, 5, 8)
    sr_ratios: tuple = (4, 2, 1, 1)
    mlp_ratio: int = 4
    patch_kernels: tuple = (7, 3, 3, 3)
    patch_strides: tuple = (4, 2, 2, 2)
    patch_pads: tuple = (3, 1, 1, 1)
    det_channels: tuple = (16, 32, 64, 128)
    canny_low: float = 100.0
    canny_high: float = 200.0
    edge_temperature: float = 1.0
    edge_filtering: bool = True
    edge_guidance: bool = True
    fusion_stage: int = 1

    def validate(self) -> "ModelConfig":
        for name in ("enc_channels", "enc_depths", "enc_heads", "sr_ratios", "patch_kernels",
                     "patch_strides", "patch_pads", "det_channels"):
            value = tuple(getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"model.{name} needs 4 entries, got {len(value)}")
            setattr(self, name, value)
        for c, h in zip(self.enc_channels, self.enc_heads):
            if c % h:
                raise ConfigError(f"model: {c} channels not divisible by {h} heads")
        if any(r < 1 for r in self.sr_ratios):
            raise ConfigError("model.sr_ratios must be >= 1")
        if self.image_size % 32:
            raise ConfigError(f"model.image_size {self.image_size} must be divisible by 32")
        if not 0 <= self.canny_low <= self.canny_high:
            raise ConfigError("model: need 0 <= canny_low <= canny_high")
        if self.edge_temperature <= 0:
            raise ConfigError("model.edge_temperature must be > 0")
        if self.fusion_stage not in (1, 2, 3, 4):
            raise ConfigError("model.fusion_stage must be 1..4")
        return self


@dataclass
class TrainConfig:
    learning_rate: float = 6e-5
    weight_decay: float = 0.01
    batch_size: int = 2
    max_steps: int = 2000
    seed: int = 0
    lam: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment_crop: bool = True
    augment_flip: bool = True
    grad_clip: float = 0.0
    checkpoint_every: int = 500

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps must be >= 0")
        if self.lam < 0:
            raise ConfigError("train.lambda must be >= 0")
        return self


@dataclass
class SynthConfig:
    size: int = 64
    words: tuple = (1, 3)
    chars_per_word: tuple = (2, 4)
    char_height: tuple = (10, 20)
    stroke_width: tuple = (1, 4)
    thin_stroke_prob: float = 0.25
    background_modes: tuple = ("gradient", "noise", "shapes")
    distractor_shapes: tuple = (2, 6)
    noise_sigma: float = 6.0
    min_contrast: int = 80
    seed: int = 0

    def validate(self) -> "SynthConfig":
        for name in ("words", "chars_per_word", "char_height", "stroke_width", "distractor_shapes"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"synth.{name} must be a (low, high) range, got {(lo, hi)}")
            setattr(self, name, (int(lo), int(hi)))
        if self.stroke_width[0] < 1:
            raise ConfigError("synth.stroke_width must be >= 1")
        unknown = set(self.background_modes) - {"gradient", "noise", "shapes"}
        if unknown:
            raise ConfigError(f"synth.background_modes: unknown modes {sorted(unknown)}")
        self.background_modes = tuple(self.background_modes)
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        return self

    def to_dict(self) -> dict:
        return {name: _section_to_dict(getattr(self, name)) for name in ("model", "train", "synth")}


# JSON key -> attribute, where they differ ("lambda" is reserved in Python)
_ALIASES = {"lambda": "lam"}
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}


def _section_to_dict(section) -> dict:
    out = {}
    for f in dataclasses.fields(section):
        value = getattr(section, f.name)
        out[_REVERSE_ALIASES.get(f.name, f.name)] = list(value) if isinstance(value, tuple) else value
    return out


def _coerce(section_name: str, f: dataclasses.Field, value: Any):
    default = f.default if f.default is not dataclasses.MISSING else None
    key = f"{section_name}.{_REVERSE_ALIASES.get(f.name, f.name)}"
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = json.loads(value) if value.strip().startswith("[") else value.split(",")
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        kind = type(default[0]) if default else str
        try:
            return tuple(kind(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if isinstance(default, (int, float)):
        try:
            number = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
        if isinstance(default, int):
            if number != int(number):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            return int(number)
        return number
    return value


def _apply(section_name: str, section, values: dict) -> None:
    if not isinstance(values, dict):
        raise ConfigError(f"{section_name}: expected an object")
    fields = {_REVERSE_ALIASES.get(f.name, f.name): f for f in dataclasses.fields(section)}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section_name}.{key}; valid keys: {', '.join(sorted(fields))}")
        f = fields[key]
        setattr(section, f.name, _coerce(section_name, f, value))


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = RunConfig()
    data = data or {}
    sections = {"model", "train", "synth"}
    for key, values in data.items():
        if key not in sections:
            raise ConfigError(f"unknown section {key}; valid sections: {', '.join(sorted(sections))}")
        _apply(key, getattr(cfg, key), values)
    return cfg.validate()


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a loaded config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} needs a section prefix (model./train./synth.)")
        section, key = dotted.split(".", 1)
        if section not in ("model", "train", "synth"):
            raise ConfigError(f"unknown section {section}; valid sections: model, synth, train")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _apply(section, getattr(cfg, section), {key: value})
    return cfg.validate()


def load_config(path: str | os.PathLike | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = config_from_dict(data)
    return apply_overrides(cfg, overrides or [])
