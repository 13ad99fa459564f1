"""YAML run configuration.

A config file is a key-value tree whose sections mirror the component
option dataclasses. Unknown keys are errors (they are usually typos),
and every effective value — default or overridden — is reported back
for provenance via `effective_dict`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .alignment import AlignmentOptions
from .builder import BuilderConfig
from .simulate import ScenarioConfig


class ConfigError(Exception):
    pass


@dataclass
class VocabularyConfig:
    branching: int = 8
    depth: int = 3
    path: str | None = None       # pretrained tree; None = train on input
    train_samples: int = 20000

    def validate(self):
        if self.branching < 2 or self.depth < 1:
            raise ConfigError("vocabulary needs branching >= 2, depth >= 1")
        return self


@dataclass
class LoopClosureConfig:
    max_candidates: int = 3
    min_score: float = 0.05
    min_separation: int = 2       # submap ids closer than this are temporal

    def validate(self):
        if self.max_candidates < 0 or not (0 <= self.min_score <= 1):
            raise ConfigError("bad loop-closure settings")
        return self


@dataclass
class PipelineConfig:
    builder: BuilderConfig = field(default_factory=BuilderConfig)
    alignment: AlignmentOptions = field(default_factory=AlignmentOptions)
    vocabulary: VocabularyConfig = field(default_factory=VocabularyConfig)
    loop_closure: LoopClosureConfig = field(default_factory=LoopClosureConfig)
    mode: str = "single"          # "single" | "two-worker"
    seed: int = 0

    def validate(self):
        if self.mode not in ("single", "two-worker"):
            raise ConfigError(f"unknown execution mode {self.mode!r}")
        try:
            self.builder.validate()
            self.alignment.validate()
        except ValueError as e:
            raise ConfigError(str(e))
        self.vocabulary.validate()
        self.loop_closure.validate()
        return self


_SECTIONS = {"builder": BuilderConfig, "alignment": AlignmentOptions,
             "vocabulary": VocabularyConfig, "loop_closure": LoopClosureConfig}


def _fill(cls, values, where):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in {where}: {e}")


def _load_yaml(path):
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config parse error: {e}")
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return doc


def load_pipeline_config(path=None, seed=None, mode=None):
    """Config file plus CLI overrides for seed and execution mode."""
    doc = _load_yaml(path) if path else {}
    top_known = set(_SECTIONS) | {"mode", "seed"}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = PipelineConfig(
        **{name: _fill(cls, doc.get(name), name)
           for name, cls in _SECTIONS.items()},
        mode=doc.get("mode", "single"),
        seed=doc.get("seed", 0))
    if seed is not None:
        cfg.seed = seed
        cfg.builder.seed = seed
        cfg.alignment.seed = seed
    if mode is not None:
        cfg.mode = mode
    return cfg.validate()


def load_scenario_config(path, seed=None):
    doc = _load_yaml(path)
    cfg = _fill(ScenarioConfig, doc, "scenario")
    if seed is not None:
        cfg.seed = seed
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    return cfg


def effective_dict(obj):
    """Nested plain-dict view of a config object, defaults included."""
    if dataclasses.is_dataclass(obj):
        return {f.name: effective_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [effective_dict(x) for x in obj]
    return obj
