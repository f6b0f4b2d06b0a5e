"""Experiment configuration files: JSON, schema-validated, unknown keys rejected.

A config has four sections (``dataset``, ``model``, ``train``, ``eval``) plus
a top-level ``seed`` used for model initialization.  Every section field
defaults to the corresponding dataclass default, so ``{}`` is a valid config
(the LDS benchmark setting at default training hyperparameters).
"""
from __future__ import annotations

import copy
import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from ..svae.model import SvaeConfig
from ..svae.training import TrainConfig
from .datasets import LdsDatasetConfig, PendulumConfig

_NUMBER = {"type": "number"}
_TYPES: dict[str, dict] = {
    "int": {"type": "integer"},
    "float": _NUMBER,
    "str": {"type": "string"},
    "bool": {"type": "boolean"},
    "int | None": {"type": ["integer", "null"]},
    "float | None": {"type": ["number", "null"]},
    "str | None": {"type": ["string", "null"]},
    "tuple[int, ...]": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    "tuple[float, float]": {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2},
}


def _properties(cls, exclude=()) -> dict[str, dict]:
    return {f.name: _TYPES[f.type] for f in dataclasses.fields(cls) if f.name not in exclude}


def _section(cls, exclude=(), extra=None) -> dict:
    props = _properties(cls, exclude)
    props.update(extra or {})
    return {"type": "object", "properties": props, "additionalProperties": False}


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    prefix: int = 50
    horizon: int = 50
    trajectories: int = 200
    seed: int = 0
    batch_size: int = 50


_LDS = _section(LdsDatasetConfig, extra={"kind": {"const": "lds"}})
_PENDULUM = _section(PendulumConfig, extra={"kind": {"const": "pendulum"}})
_DATASET_SCHEMA = {"oneOf": [
    {**_LDS, "required": ["kind"]},
    {**_PENDULUM, "required": ["kind"]},
]}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "dataset": _DATASET_SCHEMA,
        "model": _section(SvaeConfig, exclude=("obs_dim",)),
        "train": _section(TrainConfig),
        "eval": _section(EvalConfig),
        "grid": {
            "type": "array",
            "items": {"type": "object", "additionalProperties": {}},
        },
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset: dict = field(default_factory=lambda: {"kind": "lds"})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    grid: list = field(default_factory=list)

    # -- typed views ------------------------------------------------------
    def dataset_config(self) -> LdsDatasetConfig | PendulumConfig:
        d = {k: v for k, v in self.dataset.items() if k != "kind"}
        return (PendulumConfig if self.kind == "pendulum" else LdsDatasetConfig)(**d)

    @property
    def kind(self) -> str:
        return self.dataset.get("kind", "lds")

    def model_config(self, obs_dim: int) -> SvaeConfig:
        d = {"latent_dim": self.dataset.get("D", 3) if self.kind == "lds" else 3, **self.model}
        return SvaeConfig(obs_dim=obs_dim, **d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.eval)

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Apply ``{"section.key": value}`` overrides (``seed``/``name`` are top level)."""
        doc = self.to_dict()
        for key, value in overrides.items():
            if "." in key:
                section, sub = key.split(".", 1)
                doc.setdefault(section, {})[sub] = value
            else:
                doc[key] = value
        return from_dict(doc)

    def grid_points(self) -> list["ExperimentConfig"]:
        """The config itself if ``grid`` is empty, else one config per grid entry.

        A grid entry maps dotted keys to a value or a list of values; lists
        expand as a Cartesian product.
        """
        if not self.grid:
            return [self]
        out = []
        base = dataclasses.replace(self, grid=[])
        for entry in self.grid:
            keys = list(entry)
            values = [v if isinstance(v, list) else [v] for v in entry.values()]
            for combo in itertools.product(*values):
                out.append(base.with_overrides(dict(zip(keys, combo))))
        return out

    def to_dict(self) -> dict:
        return copy.deepcopy(dataclasses.asdict(self))


def validate(doc: Any) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    validate(doc)
    doc = copy.deepcopy(doc)
    doc.setdefault("dataset", {"kind": "lds"})
    cfg = ExperimentConfig(**doc)
    try:
        # constructing the typed views runs their own invariant checks
        data = cfg.dataset_config()
        cfg.model_config(obs_dim=getattr(data, "N", 1))
        cfg.train_config()
        cfg.eval_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc)
