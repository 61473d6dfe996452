"""Run configuration: one declarative file (JSON or YAML) per experiment."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .completion import CompletionConfig
from .pipeline import PipelineConfig
from .reid import ReIDConfig
from .synth import GeneratorConfig, config_to_dict
from .training import TrainConfig

CONFIG_SCHEMA = 1


class ConfigError(ValueError):
    pass


def _reid_train():
    return TrainConfig(epochs=15, batch_size=32, lr=3e-3, lr_decay=0.6)


def _completion_train():
    return TrainConfig(epochs=15, batch_size=32, lr=2e-3, lr_decay=0.5)


@dataclass
class DataConfig:
    train_scenes: int = 300
    val_scenes: int = 40
    test_scenes: int = 50
    samples_per_scene: int = 8
    min_candidates: int = 1
    fragment_fraction: float = 0.5
    fragment_gap: tuple = (2.0, 8.0)


@dataclass
class RunConfig:
    """Everything that determines a run apart from the seed."""

    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    reid: ReIDConfig = field(default_factory=ReIDConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    train_reid: TrainConfig = field(default_factory=_reid_train)
    train_completion: TrainConfig = field(default_factory=_completion_train)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    paths: dict = field(default_factory=dict)

    _SECTIONS = {
        "generator": GeneratorConfig, "data": DataConfig, "reid": ReIDConfig,
        "completion": CompletionConfig, "train_reid": TrainConfig,
        "train_completion": TrainConfig, "pipeline": PipelineConfig,
    }

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        d.pop("schema_version", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            sec = cls._SECTIONS.get(name)
            if sec is None:
                kw[name] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            allowed = {f.name for f in fields(sec)}
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            vals = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
            try:
                kw[name] = sec(**vals)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name!r} section: {e}") from e
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not 0.0 <= self.pipeline.w <= 1.0:
            raise ConfigError(f"pipeline.w must lie in [0, 1], got {self.pipeline.w}")
        if self.pipeline.tau < 0:
            raise ConfigError("pipeline.tau must be non-negative")
        for name in ("train_reid", "train_completion"):
            t = getattr(self, name)
            if t.epochs < 1 or t.batch_size < 1 or t.lr <= 0:
                raise ConfigError(f"{name} needs epochs >= 1, batch_size >= 1 and lr > 0")
        for name in ("train_scenes", "val_scenes", "test_scenes"):
            if getattr(self.data, name) < 1:
                raise ConfigError(f"data.{name} must be at least 1")
        return self

    def to_dict(self) -> dict:
        d = {"schema_version": CONFIG_SCHEMA, "seed": self.seed, "paths": dict(self.paths)}
        for name in self._SECTIONS:
            sec = getattr(self, name)
            d[name] = config_to_dict(sec) if isinstance(sec, GeneratorConfig) else _plain(asdict(sec))
        return d

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        d = self.to_dict()
        d["seed"] = int(seed)
        return RunConfig.from_dict(d)

    def model_config(self, kind: str) -> dict:
        if kind.startswith("reid"):
            return _plain(asdict(self.reid))
        if kind == "completion":
            return _plain(asdict(self.completion))
        raise ConfigError(f"unknown model kind {kind!r}")

    def model_hash(self, kind: str) -> str:
        """Digest of the settings a checkpoint of ``kind`` depends on."""
        return config_hash({"kind": kind, "model": self.model_config(kind)})

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def config_hash(d) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    """Read a JSON or YAML run config (YAML by extension ``.yaml``/``.yml``)."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix.lower() in (".yaml", ".yml"):
            import yaml
            d = yaml.safe_load(text)
        else:
            d = json.loads(text)
    except Exception as e:  # parse errors from either format
        raise ConfigError(f"cannot parse {p}: {e}") from e
    if d is not None and not isinstance(d, dict):
        raise ConfigError(f"{p} must hold a mapping at the top level")
    return RunConfig.from_dict(d)
