"""INI configuration: one section per concern, every key optional.

Values are coerced to the type of the built-in default. Tuples are written
comma separated; optional floats accept ``none``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, is_dataclass

from ..baselines import GlcmConfig, LinearConfig, LpqConfig
from ..model import ArchConfig
from ..pipeline import AugmentConfig, UnfoldGeometry
from .splits import SplitSpec
from .synth import ClassTexture, SynthConfig
from .train import TrainConfig

_OPTIONAL_FLOATS = {"cx", "cy", "r_min", "r_max", "freq"}


@dataclass
class PipelineConfig:
    window: int = 94
    overlap: float = 0.5
    target: int = 224
    geometry: UnfoldGeometry = field(default_factory=UnfoldGeometry)


@dataclass
class BaselineConfig:
    lpq: LpqConfig = field(default_factory=LpqConfig)
    glcm: GlcmConfig = field(default_factory=GlcmConfig)
    linear: LinearConfig = field(default_factory=LinearConfig)


@dataclass
class Config:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def set_seed(self, seed):
        self.train.seed = seed
        self.train.augment.seed = seed
        self.synth.seed = seed
        self.split.seed = seed


def _flatten(obj, prefix=""):
    """(dotted key, owner, attribute) for every leaf field."""
    if isinstance(obj, dict):
        for name, value in obj.items():
            yield from _flatten(value, f"{prefix}{name.lower()}.")
        return
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value) or (isinstance(value, dict) and value and
                                   all(isinstance(v, ClassTexture) for v in value.values())):
            # nested groups are flattened one level: augment.*, geometry.*, lpq.*, classes.nd.*
            sub = f"{prefix}" if f.name == "classes" else f"{prefix}{f.name}."
            yield from _flatten(value, sub)
        else:
            yield f"{prefix}{f.name}", obj, f.name


def _leaves(cfg):
    out = {}
    for f in fields(cfg):
        for key, owner, attr in _flatten(getattr(cfg, f.name)):
            out[(f.name, key)] = (owner, attr)
    return out


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text, current, attr):
    text = text.strip()
    if attr in _OPTIONAL_FLOATS:
        return None if text.lower() in ("none", "") else float(text)
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        kind = type(current[0]) if current else float
        return tuple(kind(v) for v in text.split(",") if v.strip())
    return text


def set_value(cfg, dotted, text):
    """Apply one ``section.key=value`` override."""
    section, _, key = dotted.partition(".")
    leaves = _leaves(cfg)
    if (section, key) not in leaves:
        raise KeyError(f"unknown config key {dotted!r}")
    owner, attr = leaves[(section, key)]
    setattr(owner, attr, _parse(text, getattr(owner, attr), attr))


def load_config(path=None, overrides=()):
    cfg = Config()
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        for section in parser.sections():
            for key, text in parser.items(section):
                set_value(cfg, f"{section}.{key}", text)
    for item in overrides:
        dotted, sep, text = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        set_value(cfg, dotted.strip(), text)
    return cfg


def dump_config(cfg):
    parser = configparser.ConfigParser()
    for (section, key), (owner, attr) in _leaves(cfg).items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, _format(getattr(owner, attr)))
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
