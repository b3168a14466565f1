"""Run configuration: a nested JSON document mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticTask
from .model import ModelConfig
from .search import SearchConfig


class ConfigError(ValueError):
    """Unknown key, bad value or unreadable config file."""


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "raw"
    raw_dir: str | None = None
    synthetic: SyntheticTask = field(default_factory=SyntheticTask)


@dataclass
class PretrainConfig:
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 32
    checkpoint: str | None = None  # reuse a dense checkpoint instead of training


@dataclass
class FinetuneConfig:
    epochs: int = 13
    lr: float = 1e-4
    batch_size: int = 32
    lam_dist: float = 1.0
    distill: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["kernels"] = list(self.model.kernels)
        return d


def _build(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    if "kernels" in kwargs:
        kwargs["kernels"] = tuple(kwargs["kernels"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "pretrain"): PretrainConfig,
    (RunConfig, "search"): SearchConfig,
    (RunConfig, "finetune"): FinetuneConfig,
    (DataConfig, "synthetic"): SyntheticTask,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(raw)
    return doc


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    doc = apply_overrides(doc, overrides or [])
    return _build(RunConfig, doc, "")
