"""Experiment configuration: one JSON document with a section per component.

Every section is optional in the file; missing keys take the defaults of the
corresponding dataclass. Unknown keys anywhere are rejected. The file carries
a ``version`` field so the layout can evolve.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .anchors import PyramidConfig
from .cascade import CascadeConfig
from .dataio import AugmentConfig, SynthParams
from .evaluation import EvalConfig
from .inference import InferenceConfig
from .losses import FocalParams
from .toy_detector import FeatureParams, TrainHyper

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """The configuration document is malformed or has invalid values."""


@dataclass(frozen=True)
class TrainingConfig:
    """Toy-trainer settings; the focal parameters live in their own section."""

    learning_rate: float = 0.5
    epochs: int = 40
    normalize_str: bool = True
    prior: float = 0.02
    step_growth: float = 1.1
    full_backtracks: int = 4
    max_backtracks: int = 12
    armijo: float = 1e-4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")

    def hyper(self, focal: FocalParams) -> TrainHyper:
        return TrainHyper(focal=focal, **dataclasses.asdict(self))


@dataclass(frozen=True)
class SuiteConfig:
    """Size of the synthetic reference suite run by ``ablate``."""

    seeds: int = 10
    train_scenes: int = 12
    test_scenes: int = 32

    def __post_init__(self):
        if self.seeds <= 0 or self.train_scenes <= 0 or self.test_scenes <= 0:
            raise ValueError("suite sizes must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    focal: FocalParams = field(default_factory=FocalParams)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    seed: int = 0

    @property
    def hyper(self) -> TrainHyper:
        return self.training.hyper(self.focal)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"version": CONFIG_VERSION}
        for name in _SECTIONS:
            value = getattr(self, name)
            out[name] = value.to_dict() if hasattr(value, "to_dict") else _plain(value)
        out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"version", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        kw: dict[str, Any] = {}
        for name, kind in _SECTIONS.items():
            if name not in d:
                continue
            section = d[name]
            if not isinstance(section, Mapping):
                raise ConfigError(f"section {name!r} must be an object")
            try:
                if hasattr(kind, "from_dict"):
                    kw[name] = kind.from_dict(section)
                else:
                    kw[name] = _flat_from_dict(kind, section, name)
            except ConfigError:
                raise
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("seed must be an integer")
            kw["seed"] = d["seed"]
        return cls(**kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


_SECTIONS = {
    "pyramid": PyramidConfig,
    "cascade": CascadeConfig,
    "focal": FocalParams,
    "inference": InferenceConfig,
    "eval": EvalConfig,
    "augmentation": AugmentConfig,
    "synth": SynthParams,
    "features": FeatureParams,
    "training": TrainingConfig,
    "suite": SuiteConfig,
}


def _plain(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _flat_from_dict(kind, d: Mapping, section: str):
    names = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    kw = {}
    for key, value in d.items():
        kw[key] = tuple(value) if isinstance(value, list) else value
    return kind(**kw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a JSON config file.

    Raises:
        OSError: the file cannot be read.
        ConfigError: the content is not a valid config.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return ExperimentConfig.from_dict(doc)


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def reference_config() -> ExperimentConfig:
    """The synthetic reference suite: 256-pixel scenes, otherwise defaults.

    Small images keep the full ten-seed, four-configuration suite within a
    few minutes on one core; anchor shapes, thresholds and inference limits
    keep their default values.
    """
    size = 256
    return ExperimentConfig(
        pyramid=PyramidConfig(input_size=size),
        synth=SynthParams(image_size=size, min_faces=5, max_faces=20, max_scale=0.7 * size),
        augmentation=AugmentConfig(output_size=size),
    )
