"""Run configuration: a YAML file validated into dataclasses, with flag overrides.

Schema (every section optional, unknown keys rejected)::

    seed: 0
    out: runs/demo
    manifest: data/manifest.yaml
    checkpoint: runs/pretrain/model.pt
    eval_every: 0
    checkpoint_every: 0
    model:  {ModelConfig fields}
    train:  {SelfTrainConfig fields; csf: {...}; augment: {...}}
    data:
      source: {domain: A, height: 32, width: 64, ...SyntheticConfig fields}
      target: {domain: B, ...}
      n_labeled: 512
      n_unlabeled: 128
      n_eval: 32
      gt_format: pfm
    analyze: {max_samples: 20}
    ablate:  {seeds: [0, 1, 2], cells: [baseline, st, st_hard, full, ...]}
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import DOMAINS, GT_FORMATS, SyntheticConfig, domain_config
from .errors import ConfigError
from .model import ModelConfig
from .training import SelfTrainConfig


@dataclass
class DomainSpec:
    domain: Optional[str] = None
    overrides: dict = field(default_factory=dict)

    def build(self) -> SyntheticConfig:
        if self.domain is None:
            return SyntheticConfig(**self.overrides)
        return domain_config(self.domain, **self.overrides)

    def to_dict(self) -> dict:
        d = {"domain": self.domain} if self.domain else {}
        d.update(self.overrides)
        return d


@dataclass
class DataConfig:
    source: DomainSpec = field(default_factory=lambda: DomainSpec("A", {"height": 32, "width": 64}))
    target: DomainSpec = field(default_factory=lambda: DomainSpec("B", {"height": 32, "width": 64}))
    n_labeled: int = 512
    n_unlabeled: int = 128
    n_eval: int = 32
    gt_format: str = "pfm"


@dataclass
class AnalyzeConfig:
    max_samples: int = 20
    figures: bool = True


@dataclass
class AblateConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    cells: Optional[list] = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    eval_every: int = 0
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if isinstance(obj, DomainSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, raw, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if raw is None:
        raw = {}
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        hint = hints.get(key)
        sub = _dataclass_of(hint)
        if sub is DomainSpec:
            value = _domain(value, f"{where}.{key}")
        elif sub is not None and value is not None:
            value = _build(sub, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _dataclass_of(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def _domain(raw, where: str) -> DomainSpec:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    raw = dict(raw)
    name = raw.pop("domain", None)
    if name is not None and name not in DOMAINS:
        raise ConfigError(f"{where}.domain: unknown domain {name!r}; known: {sorted(DOMAINS)}")
    fields_ = {f.name for f in dataclasses.fields(SyntheticConfig)}
    unknown = set(raw) - fields_
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    spec = DomainSpec(name, raw)
    try:
        spec.build()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return spec


def _set_path(doc: dict, dotted: str, value: Any):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def parse_assignment(text: str) -> tuple[str, Any]:
    """``key.path=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc


def load_config(path=None, overrides: Optional[dict] = None) -> tuple[RunConfig, str]:
    """Load and validate a run config; returns (config, original file text).

    ``overrides`` maps dotted keys to values and wins over the file.
    """
    text = ""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
    for key, value in (overrides or {}).items():
        _set_path(doc, key, value)
    config = _build(RunConfig, doc, "config")
    if config.data.gt_format not in GT_FORMATS:
        raise ConfigError(f"config.data.gt_format must be one of {GT_FORMATS}")
    if config.eval_every < 0:
        raise ConfigError("config.eval_every must be >= 0")
    if config.checkpoint_every < 0:
        raise ConfigError("config.checkpoint_every must be >= 0")
    if not config.ablate.seeds:
        raise ConfigError("config.ablate.seeds must not be empty")
    return config, text


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def train_config_with(base: SelfTrainConfig, overrides: dict, seed: int) -> SelfTrainConfig:
    """Copy of ``base`` with nested overrides applied (dicts merge into csf/augment)."""
    doc = _to_plain(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            merged = dict(doc[key])
            merged.update(value)
            doc[key] = merged
        else:
            doc[key] = value
    doc["seed"] = seed
    return _build(SelfTrainConfig, doc, "train")


__all__ = ["RunConfig", "DataConfig", "DomainSpec", "AnalyzeConfig", "AblateConfig", "load_config",
           "dump_config", "parse_assignment", "train_config_with"]
