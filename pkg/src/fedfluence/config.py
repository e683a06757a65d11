"""Experiment configuration files and shipped presets.

Config files are INI-style with four sections; unknown sections or keys are
rejected::

    [model]       kind, input_dim, classes, hidden, activation
    [data]        source, path, format, seed, skew, median_size, ...
    [federation]  lr, num_clients, clients_per_round, local_iters, ...
    [experiment]  kind, eval_rounds, intervention_round, ...
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .data import FederationData, load_federation, synth_generate
from .errors import ConfigError
from .fedavg import HESSIANS, MODES, FederationConfig
from .model import ModelSpec

KINDS = ("fip-error", "fil-correlation", "valuation", "cleansing", "diagnostics")
STRATEGIES = ("lowest", "highest", "random")
PRESETS = ("convex-small", "nonconvex-small", "blowup-demo")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    format: str = "csv"
    seed: int = 0
    skew: str = "noniid-unbalanced"
    input_dim: int = 10
    classes: int = 5
    median_size: int = 20
    size_sigma: float = 1.0
    min_size: int = 5
    test_fraction: float = 0.2
    class_sep: float = 1.5
    client_shift: float = 1.0
    label_concentration: float = 0.5


@dataclass(frozen=True)
class ExperimentSettings:
    kind: str = "fil-correlation"
    eval_rounds: tuple[int, ...] = ()
    estimators: tuple[str, ...] = ()
    intervention_round: int = 0
    removal_fraction: float = 0.2
    fractions: tuple[float, ...] = (0.1, 0.2, 0.3)
    strategy: str = "all"
    metric: str = "fil"
    repeats: int = 5
    experiment_seed: int = 0
    oracle_cap: int = 0
    self_test: bool = False
    output: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    data: DataConfig
    federation: FederationConfig
    experiment: ExperimentSettings
    name: str = ""

    def validate(self) -> "ExperimentConfig":
        fed, exp = self.federation, self.experiment
        fed.validate()
        if self.model.input_dim != self.data.input_dim or self.model.classes != self.data.classes:
            raise ConfigError("model and data disagree on input_dim/classes")
        if exp.kind not in KINDS:
            raise ConfigError(f"experiment kind must be one of {KINDS}, got {exp.kind!r}")
        if any(not 1 <= t <= fed.rounds for t in exp.eval_rounds):
            raise ConfigError(f"evaluation rounds must lie in [1, {fed.rounds}]")
        for est in exp.estimators:
            mode, _, hess = est.partition("/")
            if mode not in MODES or hess not in HESSIANS:
                raise ConfigError(f"bad estimator {est!r}; use <mode>/<hessian>")
        if exp.kind in ("cleansing", "valuation"):
            if not 0 < exp.intervention_round < fed.rounds:
                raise ConfigError("intervention round must lie in (0, rounds)")
            fracs = exp.fractions if exp.kind == "valuation" else (exp.removal_fraction,)
            for f in fracs:
                if not 0 < f < 1:
                    raise ConfigError(f"removal fraction must lie in (0, 1), got {f}")
                if round(f * fed.num_clients) >= fed.num_clients:
                    raise ConfigError(f"removal fraction {f} removes every client")
            if exp.strategy not in (*STRATEGIES, "all"):
                raise ConfigError(f"strategy must be one of {STRATEGIES} or 'all'")
            if exp.metric not in ("fil", "fia"):
                raise ConfigError("metric must be 'fil' or 'fia'")
            if exp.repeats < 1:
                raise ConfigError("repeats must be >= 1")
        if exp.oracle_cap < 0:
            raise ConfigError("oracle_cap must be >= 0")
        return self

    @property
    def estimator_list(self) -> tuple[tuple[str, str], ...]:
        ests = self.experiment.estimators or (f"{self.federation.mode}/{self.federation.hessian}",)
        return tuple(tuple(e.split("/", 1)) for e in ests)

    def build_data(self) -> FederationData:
        d = self.data
        if d.source == "synthetic":
            return synth_generate(
                self.federation.num_clients, d.input_dim, d.classes, d.seed, d.skew,
                median_size=d.median_size, size_sigma=d.size_sigma, min_size=d.min_size,
                test_fraction=d.test_fraction, class_sep=d.class_sep, client_shift=d.client_shift,
                label_concentration=d.label_concentration)
        if d.source == "file":
            return load_federation(d.path, d.format)
        raise ConfigError(f"data source must be 'synthetic' or 'file', got {d.source!r}")

    def override(self, **sections) -> "ExperimentConfig":
        """``cfg.override(federation={"lr": 0.1}, data={"seed": 3})``."""
        out = self
        for section, changes in sections.items():
            current = getattr(out, section)
            out = replace(out, **{section: replace(current, **changes)})
        return out

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "data": dataclasses.asdict(self.data),
            "federation": dataclasses.asdict(self.federation),
            "experiment": {k: v for k, v in dataclasses.asdict(self.experiment).items() if k != "output"},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for section, obj in (("model", self.model), ("data", self.data),
                             ("federation", self.federation), ("experiment", self.experiment)):
            lines.append(f"[{section}]")
            for f in fields(obj):
                value = getattr(obj, f.name)
                if isinstance(value, tuple):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.replace(";", ",").split(",") if s.strip()]
            return items
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


_SECTION_TYPES = {
    "model": ModelSpec,
    "data": DataConfig,
    "federation": FederationConfig,
    "experiment": ExperimentSettings,
}

_TUPLE_ITEM = {
    ("model", "hidden"): int,
    ("experiment", "eval_rounds"): int,
    ("experiment", "fractions"): float,
    ("experiment", "estimators"): str,
}


def parse_config(text: str, name: str = "") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    unknown = set(parser.sections()) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for section, cls in _SECTION_TYPES.items():
        defaults = cls()
        known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                value = _convert(raw, known[key], f"{section}.{key}")
                if isinstance(known[key], tuple):
                    conv = _TUPLE_ITEM[(section, key)]
                    try:
                        value = tuple(conv(v) for v in value)
                    except ValueError:
                        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None
                kwargs[key] = value
        try:
            parts[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}]: {exc}") from None
    cfg = ExperimentConfig(parts["model"], parts["data"], parts["federation"], parts["experiment"], name)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        if path.name in PRESETS or path.stem in PRESETS:
            return preset(path.stem)
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), path.stem)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("fedfluence.presets").joinpath(f"{name}.ini").read_text(encoding="utf-8")


def preset(name: str) -> ExperimentConfig:
    return parse_config(preset_text(name), name)
