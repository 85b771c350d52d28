"""Experiment configuration: TOML files plus ``key=value`` overrides.

Every field has a default, so an empty file is a valid configuration.
Keys are addressed as ``section.field``; a bare field name works when it
is unique, and a few short aliases (``N``, ``C``, ``T``, ``tau``) map to
their long names.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigError

METHODS = ("fedavg", "feddh", "fedad", "feddhad", "feddhe")


@dataclass
class ExperimentSection:
    method: str = "fedavg"
    seed: int = 0
    rounds: int = 500
    eval_stride: int = 1
    target_accuracy: float | None = None
    stop_at_target: bool = False
    workers: int = 1


@dataclass
class FederationSection:
    device_count: int = 100
    selection_fraction: float = 0.1
    local_epochs: int = 5
    batch_size: int = 10
    lr: float = 0.1
    lr_decay: float = 0.99


@dataclass
class DataSection:
    class_count: int = 10
    dim: int = 20
    per_class_count: int = 600
    cluster_spread: float = 0.6
    modes_per_class: int = 1
    test_fraction: float = 0.2
    partition_beta: float = 0.5
    balanced_per_class: int = 10
    validation_fraction: float = 0.05
    data_seed: int | None = None


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [32])


@dataclass
class FedDHSection:
    lr_upsilon: float = 1e-2
    decay_upsilon: float = 0.99
    lr_bias: float = 1e-2
    decay_bias: float = 0.99
    estimation_beta: float = 10.0
    gradient_mode: str = "analytic"


@dataclass
class FedADSection:
    interval: int = 5
    patience: int = 3
    d_cap: float = 0.95
    rank_tol: float = 1e-6
    hessian_block: int = -1
    hessian_cap: int = 512
    lipschitz_probes: int = 8
    probe_radius: float = 1e-2
    fixed_base_rate: float | None = None
    strict_literal: bool = False


@dataclass
class DevicesSection:
    compute_rate: float = 1.0  # seconds per MFLOP, fastest device
    compute_span: float = 4.0
    bandwidth: float = 2e4  # bytes per second, best link
    bandwidth_span: float = 1.0


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    federation: FederationSection = field(default_factory=FederationSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    feddh: FedDHSection = field(default_factory=FedDHSection)
    fedad: FedADSection = field(default_factory=FedADSection)
    devices: DevicesSection = field(default_factory=DevicesSection)

    @property
    def method(self) -> str:
        return self.experiment.method

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def to_dict(self) -> dict[str, dict[str, Any]]:
        """Plain nested dict; ``None`` fields are omitted (TOML has no null)."""
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: v for k, v in section.items() if v is not None}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def validate(self) -> "ExperimentConfig":
        e, fed, d, m = self.experiment, self.federation, self.data, self.model
        checks = [
            (e.method in METHODS, f"method must be one of {', '.join(METHODS)}"),
            (e.rounds >= 0, "rounds must be >= 0"),
            (e.eval_stride >= 1, "eval_stride must be >= 1"),
            (e.workers >= 1, "workers must be >= 1"),
            (e.target_accuracy is None or 0 <= e.target_accuracy <= 1, "target accuracy must be in [0,1]"),
            (fed.device_count >= 1, "device count must be >= 1"),
            (0 < fed.selection_fraction <= 1, "selection fraction must be in (0,1]"),
            (fed.device_count * fed.selection_fraction >= 1, "device_count * selection_fraction must be >= 1"),
            (fed.local_epochs >= 1, "local epochs must be >= 1"),
            (fed.batch_size >= 1, "batch size must be >= 1"),
            (fed.lr > 0, "learning rate must be positive"),
            (0 < fed.lr_decay <= 1, "learning-rate decay must be in (0,1]"),
            (d.class_count >= 2, "class count must be >= 2"),
            (d.dim >= 1 and d.per_class_count >= 1, "dim and per_class_count must be >= 1"),
            (d.cluster_spread >= 0, "cluster spread must be >= 0"),
            (d.modes_per_class >= 1, "modes_per_class must be >= 1"),
            (0 < d.test_fraction < 1, "test fraction must be in (0,1)"),
            (d.partition_beta > 0, "partition_beta must be positive"),
            (d.balanced_per_class >= 1, "balanced_per_class must be >= 1"),
            (0 <= d.validation_fraction < 1, "validation fraction must be in [0,1)"),
            (all(h >= 1 for h in m.hidden), "hidden layer sizes must be >= 1"),
            (self.feddh.lr_upsilon >= 0 and self.feddh.lr_bias >= 0, "control learning rates must be >= 0"),
            (0 < self.feddh.decay_upsilon <= 1 and 0 < self.feddh.decay_bias <= 1, "control decays must be in (0,1]"),
            (self.feddh.gradient_mode in ("analytic", "finite_diff"), "gradient_mode must be analytic or finite_diff"),
            (self.fedad.interval >= 1 and self.fedad.patience >= 1, "trigger interval and patience must be >= 1"),
            (0 < self.fedad.d_cap < 1, "d_cap must be in (0,1)"),
            (self.fedad.fixed_base_rate is None or 0 < self.fedad.fixed_base_rate <= 1, "fixed_base_rate must be in (0,1]"),
            (self.devices.compute_rate > 0 and self.devices.bandwidth > 0, "device rates must be positive"),
            (self.devices.compute_span >= 1 and self.devices.bandwidth_span >= 1, "device spans must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.method == "feddhe" or self.method.startswith("feddh"):
            if d.validation_fraction == 0 and self.method != "fedad":
                raise ConfigError("feddh-family methods need validation_fraction > 0")
        return self


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
ALIASES = {
    "N": "federation.device_count",
    "C": "federation.selection_fraction",
    "T": "experiment.rounds",
    "tau": "federation.local_epochs",
}


def _section_fields() -> dict[str, dict[str, dataclasses.Field]]:
    default = ExperimentConfig()
    return {
        name: {f.name: f for f in dataclasses.fields(getattr(default, name))}
        for name in SECTIONS
    }


def resolve_key(key: str) -> tuple[str, str]:
    key = ALIASES.get(key, key)
    fields = _section_fields()
    if "." in key:
        section, name = key.split(".", 1)
        if section in fields and name in fields[section]:
            return section, name
        raise ConfigError(f"unknown configuration key {key!r}")
    owners = [s for s, fs in fields.items() if key in fs]
    if len(owners) == 1:
        return owners[0], key
    if not owners:
        raise ConfigError(f"unknown configuration key {key!r}")
    raise ConfigError(f"ambiguous key {key!r}; use one of " + ", ".join(f"{s}.{key}" for s in owners))


def _coerce(section: str, name: str, value: Any) -> Any:
    default = getattr(getattr(ExperimentConfig(), section), name)
    ftype = str(_section_fields()[section][name].type)
    if isinstance(value, bool) and "bool" not in ftype:
        raise ConfigError(f"{section}.{name}: expected a number, got a boolean")
    try:
        if "bool" in ftype:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if ftype.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if ftype.startswith("float"):
            return float(value)
        if ftype.startswith("list"):
            return [int(v) for v in (value if isinstance(value, list) else [value])]
        if ftype == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{name}: invalid value {value!r}") from None
    return type(default)(value) if default is not None else value


def _parse_scalar(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply(config: ExperimentConfig, key: str, value: Any) -> None:
    section, name = resolve_key(key)
    setattr(getattr(config, section), name, _coerce(section, name, value))


def from_dict(data: dict) -> ExperimentConfig:
    config = ExperimentConfig()
    for section, values in data.items():
        if section not in SECTIONS or not isinstance(values, dict):
            raise ConfigError(f"unknown configuration section {section!r}")
        for name, value in values.items():
            apply(config, f"{section}.{name}", value)
    return config


def parse_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a TOML file (or defaults), apply ``key=value`` overrides, validate."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from exc
    config = from_dict(data)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        apply(config, key.strip(), _parse_scalar(raw.strip()))
    return config.validate()


def loads(text: str) -> ExperimentConfig:
    try:
        return from_dict(tomli.loads(text)).validate()
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from exc
