"""Experiment configuration: typed sections, INI-style text, strict parsing.

Sections and keys (defaults in brackets)::

    [data]        source [synthetic] | table, num_classes [4], dim [16],
                  n_per_class [250], spread [0.12], path, label_column [label]
    [model]       hidden_dims [32,32]
    [federation]  n_clients [20], n_select [5], rounds [60], seed [0],
                  alpha [0.5], malicious_fraction [0.1], local_epochs [1],
                  lr [0.05], batch_size [16]
    [strategy]    see pflsim.strategies.StrategyConfig
    [attack]      see pflsim.attacks.AttackConfig (mask is a comma list)
    [defense]     see pflsim.defenses.DefenseConfig
    [eval]        test_fraction [0.2], personalize_epochs [1]

Unknown sections or keys are errors. :func:`dumps` writes every key in a
fixed order, so ``dumps(loads(dumps(cfg))) == dumps(cfg)``.
"""

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .defenses import DefenseConfig
from .strategies import StrategyConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 4
    dim: int = 16
    n_per_class: int = 250
    spread: float = 0.12
    path: str = ""
    label_column: str = "label"

    def __post_init__(self):
        if self.source not in ("synthetic", "table"):
            raise ValueError("data.source must be 'synthetic' or 'table'")
        if self.source == "table" and not self.path:
            raise ValueError("data.path is required for table data")


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 20
    n_select: int = 5
    rounds: int = 60
    seed: int = 0
    alpha: float = 0.5
    malicious_fraction: float = 0.1
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16

    def __post_init__(self):
        if not 1 <= self.n_select <= self.n_clients:
            raise ValueError("need 1 <= n_select <= n_clients")
        if self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("rounds/local_epochs must be >= 0 and batch_size >= 1")
        if self.alpha <= 0 or not 0 <= self.malicious_fraction < 1:
            raise ValueError("alpha must be positive and malicious_fraction in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    test_fraction: float = 0.2
    personalize_epochs: int = 1

    def __post_init__(self):
        if not 0 < self.test_fraction < 1 or self.personalize_epochs < 0:
            raise ValueError("test_fraction in (0, 1) and personalize_epochs >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationConfig = field(default_factory=FederationConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # cross-section checks; table dims are only known after loading
        classes = self.data.num_classes if self.data.source == "synthetic" else None
        if classes is not None and not 0 <= self.attack.target < classes:
            raise ConfigError(f"attack.target {self.attack.target} outside [0, {classes})")
        if self.data.source == "synthetic" and any(not 0 <= i < self.data.dim for i in self.attack.mask):
            raise ConfigError(f"attack.mask has indices outside [0, {self.data.dim})")
        if self.federation.n_select > self.federation.n_clients:
            raise ConfigError("federation.n_select exceeds federation.n_clients")

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides):
        """Apply ``{"section.key": "text value"}`` overrides."""
        text = {s.name: {} for s in dataclasses.fields(self)}
        for key, value in overrides.items():
            if "." not in key:
                raise ConfigError(f"override {key!r} must look like section.key")
            sec, name = key.split(".", 1)
            if sec not in text:
                raise ConfigError(f"unknown section {sec!r}")
            text[sec][name] = str(value)
        parts = {}
        for f in dataclasses.fields(self):
            cur = getattr(self, f.name)
            if text[f.name]:
                vals = {g.name: getattr(cur, g.name) for g in dataclasses.fields(cur)}
                for name, raw in text[f.name].items():
                    vals[name] = _parse_field(type(cur), name, raw, f.name)
                parts[f.name] = _build(type(cur), vals, f.name)
        return self.replace(**parts)

    def hash(self):
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:12]


SECTIONS = [(f.name, f.default_factory) for f in dataclasses.fields(ExperimentConfig)]


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_field(cls, name, raw, section):
    types = _field_types(cls)
    if name not in types:
        raise ConfigError(f"unknown key {section}.{name}")
    tp = types[name]
    raw = raw.strip()
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{name}: cannot parse {raw!r} as {tp.__name__}") from None


def _build(cls, vals, section):
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def loads(text):
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    known = dict(SECTIONS)
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    parts = {}
    for name, factory in SECTIONS:
        default = factory()
        cls = type(default)
        vals = {f.name: getattr(default, f.name) for f in dataclasses.fields(cls)}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                vals[key] = _parse_field(cls, key, raw, name)
        parts[name] = _build(cls, vals, name)
    return ExperimentConfig(**parts)


def dumps(cfg):
    lines = []
    for name, _ in SECTIONS:
        sec = getattr(cfg, name)
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"


def load(path):
    try:
        with open(path) as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
