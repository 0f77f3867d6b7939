"""Hyperparameter and component parameter tables.

Tables are declared in a TOML document::

    param.hyper.module_size = { kind = "random-integer", options = [1, 3] }
    param.conv2d.kernel_size = { kind = "random-choice", options = [1, 3, 5] }

Scope ``hyper`` holds the seven hyperparameter entries; every other scope is a
component table named after its layer type.  Training scalars that the tables
do not cover live under ``[training]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping

import numpy as np
import tomli
import tomli_w

KINDS = ("fixed", "random-integer", "random-float", "random-choice")

HYPER_KEYS = (
    "module_size",
    "blueprint_size",
    "intermediate_component_types",
    "output_component_types",
    "loss_functions",
    "optimizers",
    "evaluation_metrics",
)

TRAINING_DEFAULTS = {"learning_rate": 1e-3, "epochs": 4, "batch_size": 64}


class TableError(ValueError):
    """Malformed table document; the message names the offending key."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    options: tuple

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        key = self.name
        if self.kind not in KINDS:
            raise TableError(f"{key}: unknown kind {self.kind!r}")
        if not self.options:
            raise TableError(f"{key}: empty options")
        if self.kind == "fixed" and len(self.options) != 1:
            raise TableError(f"{key}: fixed spec needs exactly one option, got {len(self.options)}")
        if self.kind in ("random-integer", "random-float"):
            if len(self.options) != 2:
                raise TableError(f"{key}: {self.kind} needs an interval [low, high]")
            low, high = self.options
            if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in (low, high)):
                raise TableError(f"{key}: interval bounds must be numbers")
            if self.kind == "random-integer" and not all(isinstance(x, int) for x in (low, high)):
                raise TableError(f"{key}: random-integer bounds must be integers")
            if low > high:
                raise TableError(f"{key}: low > high ({low} > {high})")

    def sample(self, rng: np.random.Generator):
        if self.kind == "fixed":
            return self.options[0]
        if self.kind == "random-integer":
            return int(rng.integers(self.options[0], self.options[1] + 1))
        if self.kind == "random-float":
            low, high = self.options
            return float(low + (high - low) * rng.random())
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, value) -> bool:
        if self.kind in ("fixed", "random-choice"):
            return value in self.options
        low, high = self.options
        if self.kind == "random-integer" and not isinstance(value, (int, np.integer)):
            return False
        return low <= value <= high

    def to_dict(self) -> dict:
        return {"kind": self.kind, "options": list(self.options)}


@dataclass(frozen=True)
class LayerSpec:
    """Concrete layer: a layer type plus sampled parameter values."""

    layer_type: str
    params: tuple = ()

    def __post_init__(self):
        params = self.params.items() if isinstance(self.params, Mapping) else self.params
        object.__setattr__(self, "params", tuple(sorted(params)))

    def __getitem__(self, name: str):
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)

    def get(self, name: str, default=None):
        try:
            return self[name]
        except KeyError:
            return default

    def as_dict(self) -> dict:
        return dict(self.params)

    def size(self) -> float:
        """Width contribution: conv filters or dense units (0 for anything else)."""
        if self.layer_type == "conv2d":
            return float(self["filters"])
        if self.layer_type == "dense":
            return float(self["units"])
        return 0.0

    def label(self) -> str:
        if self.layer_type == "conv2d":
            return (
                f"conv2d {self['filters']}f k{self['kernel_size']} s{self['stride']} "
                f"{self['activation']} d{self.get('dropout', 0.0):.2f}"
            )
        if self.layer_type == "dense":
            return f"dense {self['units']} {self['activation']}"
        return self.layer_type


@dataclass(frozen=True)
class ComponentTable:
    layer_type: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))

    def spec(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


def sample_layer(table: ComponentTable, rng: np.random.Generator) -> LayerSpec:
    """Draw every parameter of ``table`` independently."""
    return LayerSpec(table.layer_type, {p.name: p.sample(rng) for p in table.params})


@dataclass(frozen=True)
class TrainingHyperparams:
    loss: str
    optimizer: str
    metrics: tuple
    learning_rate: float = TRAINING_DEFAULTS["learning_rate"]
    epochs: int = TRAINING_DEFAULTS["epochs"]
    batch_size: int = TRAINING_DEFAULTS["batch_size"]


@dataclass(frozen=True)
class HyperparamTable:
    module_size: ParamSpec
    blueprint_size: ParamSpec
    intermediate_component_types: ParamSpec
    output_component_types: ParamSpec
    loss_functions: ParamSpec
    optimizers: ParamSpec
    evaluation_metrics: ParamSpec
    learning_rate: float = TRAINING_DEFAULTS["learning_rate"]
    epochs: int = TRAINING_DEFAULTS["epochs"]
    batch_size: int = TRAINING_DEFAULTS["batch_size"]

    def entries(self) -> dict[str, ParamSpec]:
        return {k: getattr(self, k) for k in HYPER_KEYS}

    def size_range(self, which: str) -> tuple[int, int]:
        spec: ParamSpec = getattr(self, which)
        if spec.kind == "random-integer":
            return int(spec.options[0]), int(spec.options[1])
        values = [int(v) for v in spec.options]
        return min(values), max(values)


def sample_training_hyperparams(table: HyperparamTable, rng: np.random.Generator) -> TrainingHyperparams:
    loss = table.loss_functions.sample(rng)
    optimizer = table.optimizers.sample(rng)
    if table.evaluation_metrics.kind == "fixed":
        metrics = tuple(table.evaluation_metrics.options)
    else:
        metrics = (table.evaluation_metrics.sample(rng),)
    return TrainingHyperparams(
        loss=loss,
        optimizer=optimizer,
        metrics=metrics,
        learning_rate=table.learning_rate,
        epochs=table.epochs,
        batch_size=table.batch_size,
    )


@dataclass(frozen=True)
class Tables:
    hyper: HyperparamTable
    components: dict = field(default_factory=dict)

    def component(self, layer_type: str) -> ComponentTable:
        try:
            return self.components[layer_type]
        except KeyError:
            raise TableError(f"no component table for layer type {layer_type!r}") from None

    def sample_intermediate(self, rng: np.random.Generator) -> LayerSpec:
        layer_type = self.hyper.intermediate_component_types.sample(rng)
        return sample_layer(self.component(layer_type), rng)


def _spec_from(key: str, entry) -> ParamSpec:
    if not isinstance(entry, Mapping) or set(entry) != {"kind", "options"}:
        raise TableError(f"{key}: expected {{ kind = ..., options = [...] }}")
    options = entry["options"]
    if not isinstance(options, list):
        raise TableError(f"{key}: options must be a list")
    return ParamSpec(key, entry["kind"], tuple(options))


def tables_from_dict(doc: Mapping[str, Any]) -> Tables:
    params = doc.get("param")
    if not isinstance(params, Mapping):
        raise TableError("param: missing [param.*] tables")
    hyper_doc = params.get("hyper")
    if not isinstance(hyper_doc, Mapping):
        raise TableError("param.hyper: missing hyperparameter table")
    hyper_specs = {}
    for key in HYPER_KEYS:
        if key not in hyper_doc:
            raise TableError(f"param.hyper.{key}: missing entry")
        spec = _spec_from(f"param.hyper.{key}", hyper_doc[key])
        hyper_specs[key] = ParamSpec(key, spec.kind, spec.options)
    unknown = set(hyper_doc) - set(HYPER_KEYS)
    if unknown:
        raise TableError(f"param.hyper.{sorted(unknown)[0]}: unknown hyperparameter")
    training = dict(TRAINING_DEFAULTS)
    for key, value in (doc.get("training") or {}).items():
        if key not in TRAINING_DEFAULTS:
            raise TableError(f"training.{key}: unknown training key")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            raise TableError(f"training.{key}: must be a positive number")
        if key in ("epochs", "batch_size") and not isinstance(value, int):
            raise TableError(f"training.{key}: must be an integer")
        training[key] = value
    if training["epochs"] < 0:
        raise TableError("training.epochs: must be non-negative")
    hyper = HyperparamTable(**hyper_specs, **training)

    components = {}
    for scope, entries in params.items():
        if scope == "hyper":
            continue
        if not isinstance(entries, Mapping) or not entries:
            raise TableError(f"param.{scope}: empty component table")
        specs = []
        for name, entry in entries.items():
            spec = _spec_from(f"param.{scope}.{name}", entry)
            specs.append(ParamSpec(name, spec.kind, spec.options))
        components[scope] = ComponentTable(scope, tuple(specs))
    for key in ("intermediate_component_types", "output_component_types"):
        for layer_type in getattr(hyper, key).options:
            if layer_type not in components:
                raise TableError(f"param.hyper.{key}: no component table param.{layer_type}")
    return Tables(hyper, components)


def parse_tables(config_text: str) -> Tables:
    """Parse a table document; raises TableError naming the offending key."""
    try:
        doc = tomli.loads(config_text)
    except tomli.TOMLDecodeError as exc:
        raise TableError(f"malformed document: {exc}") from None
    return tables_from_dict(doc)


def tables_to_dict(tables: Tables) -> dict:
    hyper = tables.hyper
    params = {"hyper": {k: s.to_dict() for k, s in hyper.entries().items()}}
    for layer_type, table in tables.components.items():
        params[layer_type] = {p.name: p.to_dict() for p in table.params}
    training = {k: getattr(hyper, k) for k in TRAINING_DEFAULTS}
    return {"training": training, "param": params}


def serialize_tables(tables: Tables) -> str:
    return tomli_w.dumps(tables_to_dict(tables))


def shipped_config_text(name: str = "experiment") -> str:
    """A configuration bundled with the package: ``experiment`` or ``desk``."""
    return resources.files("coevonas").joinpath(f"data/{name}.conf").read_text()


def experiment_config_text() -> str:
    """The shipped experiment configuration (experiment tables plus run keys)."""
    return shipped_config_text("experiment")


def experiment_tables() -> Tables:
    return parse_tables(experiment_config_text())
