"""Experiment configuration: one YAML file plus dotted ``key=value`` overrides.

Precedence is command line > file > dataclass defaults.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from negcut.data import SynthConfig
from negcut.errors import ConfigError
from negcut.evaluation import FeatureEmbedderConfig
from negcut.training import TrainConfig

OUT_ENV = "NEGCUT_OUT"


@dataclass
class DataConfig:
    """``kind="synth"`` generates the shapes task in memory; ``kind="folders"``
    reads ``domain_a`` / ``domain_b`` image folders."""

    kind: str = "synth"
    synth: SynthConfig = field(default_factory=SynthConfig)
    domain_a: str | None = None
    domain_b: str | None = None

    def validate(self):
        if self.kind not in ("synth", "folders"):
            raise ConfigError("data.kind", "must be 'synth' or 'folders'")
        if self.kind == "folders" and not (self.domain_a and self.domain_b):
            raise ConfigError("data.domain_a", "folder datasets need both domain_a and domain_b")
        if self.kind == "synth":
            try:
                self.synth.validate()
            except ConfigError as e:
                raise ConfigError(f"data.synth.{e.field}", e.message) from e
        return self


@dataclass
class AblationConfig:
    """Grid axes for ``negcut ablate``. With the generator off, the diversity
    flag and bank size do not apply, so that cell runs once."""

    neg_generator: list = field(default_factory=lambda: [True, False])
    diversity: list = field(default_factory=lambda: [True, False])
    num_negatives: list = field(default_factory=lambda: [64, 128, 256, 512])
    probe_images: int = 8

    def validate(self):
        for name in ("neg_generator", "diversity", "num_negatives"):
            if not getattr(self, name):
                raise ConfigError(f"ablate.{name}", "needs at least one value")
        if any(int(n) < 1 for n in self.num_negatives):
            raise ConfigError("ablate.num_negatives", "bank sizes must be >= 1")
        return self

    def cells(self):
        out = []
        for gen in self.neg_generator:
            if not gen:
                out.append({"use_neg_generator": False})
                continue
            for div in self.diversity:
                for n in self.num_negatives:
                    out.append({"use_neg_generator": True, "use_diversity_loss": bool(div), "num_negatives": int(n)})
        return out


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    embedder: FeatureEmbedderConfig = field(default_factory=FeatureEmbedderConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)
    out_dir: str = "runs"
    run_name: str = "negcut"

    def validate(self):
        try:
            self.train.validate()
        except ConfigError as e:
            raise ConfigError(f"train.{e.field}", e.message) from e
        self.data.validate()
        try:
            self.embedder.validate()
        except ConfigError as e:
            raise ConfigError(f"embedder.{e.field}", e.message) from e
        self.ablate.validate()
        if self.data.kind == "synth" and self.data.synth.image_size != self.train.image_size:
            raise ConfigError("data.synth.image_size", "must equal train.image_size")
        return self

    @property
    def run_dir(self):
        return Path(self.out_dir) / self.run_name

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d or {}, "")

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path):
        path = Path(path)
        text = path.read_text()
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError("<file>", f"cannot parse {path}: {e}") from e
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("<file>", "top level must be a mapping")
        return cls.from_dict(raw)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    kwargs = {}
    by_name = {f.name: f for f in fields(cls)}
    for key, value in d.items():
        if key not in by_name:
            raise ConfigError(prefix + key, "unknown option")
        sub = _nested_type(cls, key)
        kwargs[key] = _build(sub, value, f"{prefix}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(prefix.rstrip(".") or "<root>", str(e)) from e


_NESTED = {
    ("ExperimentConfig", "train"): TrainConfig,
    ("ExperimentConfig", "data"): DataConfig,
    ("ExperimentConfig", "embedder"): FeatureEmbedderConfig,
    ("ExperimentConfig", "ablate"): AblationConfig,
    ("DataConfig", "synth"): SynthConfig,
}


def _nested_type(cls, key):
    return _NESTED.get((cls.__name__, key))


def parse_value(text):
    """YAML scalar semantics: ``3`` -> int, ``1e-4`` -> float, ``[1, 5]`` -> list, ``none`` -> None."""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str) and value.lower() in ("none", "null"):
        return None
    # YAML 1.1 reads "1e-4" as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(d, overrides):
    """Set dotted keys (``train.lr_g=1e-4``) in a nested dict; returns a new dict."""
    out = _plain(d)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "overrides must look like key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(key, "unknown option")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(key, "unknown option")
        node[parts[-1]] = parse_value(text)
    return out


def resolve_config(path=None, overrides=(), out=None, seed=None, env=None) -> ExperimentConfig:
    """Defaults, then the file, then ``--set`` overrides, ``--seed`` and ``--out``."""
    env = os.environ if env is None else env
    base = ExperimentConfig()
    if env.get(OUT_ENV):
        base.out_dir = env[OUT_ENV]
    d = base.to_dict()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        ExperimentConfig.load(path)  # rejects unknown keys with their dotted name
        d = _deep_update(d, raw)
    d = apply_overrides(d, overrides)
    if seed is not None:
        d["train"]["seed"] = int(seed)
        d["data"]["synth"]["seed"] = int(seed)
    if out is not None:
        d["out_dir"] = str(out)
    return ExperimentConfig.from_dict(d).validate()


def _deep_update(base, new):
    out = dict(base)
    for k, v in new.items():
        out[k] = _deep_update(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def replace(cfg: ExperimentConfig, **train_changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_changes))
