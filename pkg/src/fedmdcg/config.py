"""Declarative experiment files (TOML) with strict validation.

An experiment file names the method, the seeds to repeat over, an output
directory, the protocol hyperparameters and the dataset. Unknown keys are
rejected so typos fail before any compute. Command-line overrides use
``section.key=value`` (or a bare key when unambiguous) with TOML-literal
values.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import HyperParams
from .protocol import AGG_MODES, RunConfig

METHODS = ("fedmdcg", "fedavg", "lt", "fedper", "lgfedavg")


class ConfigError(ValueError):
    """Invalid experiment file or override."""


_EXPERIMENT_KEYS = {"method": str, "seeds": list, "output_dir": str}

_PROTOCOL_KEYS = {
    "rounds": int, "clients": int, "client_steps": int, "server_steps": int,
    "batch": int, "lr_model": float, "lr_gen": float, "lr_server": float,
    "weight_decay": float, "noise_dim": int, "agg": str, "omega": float,
    "backbone": str, "generator_hidden": int, "div_variant": int,
    "detach_teacher_branch": bool, "probe_batch": int, "eval_batch": int,
    "lambda1": float, "lambda2": float, "lambda3": float, "lambda4": float,
    "lambda5": float, "lambda6": float, "ramp_exponent": float,
}

_DATASET_KEYS = {
    "name": str, "data_dir": str, "train_subset": int, "test_subset": int,
    "blobs_classes": int, "blobs_dim": int, "blobs_per_class": int,
    "blobs_test_per_class": int, "blobs_separation": float,
}

_ATTACK_KEYS = {"steps": int, "lr": float, "bound_low": float,
                "bound_high": float, "secret_size": int}

_TOYVIZ_KEYS = {"variant": str, "teacher_steps": int, "gen_steps": int,
                "batch": int, "lr_teacher": float, "lr_gen": float,
                "diversity_weight": float}

_SECTIONS = {
    "experiment": _EXPERIMENT_KEYS,
    "protocol": _PROTOCOL_KEYS,
    "dataset": _DATASET_KEYS,
    "attack": _ATTACK_KEYS,
    "toyviz": _TOYVIZ_KEYS,
}


@dataclass
class ExperimentFile:
    """Validated experiment document."""

    method: str = "fedmdcg"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"
    protocol: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    toyviz: dict = field(default_factory=dict)

    def run_config(self, seed: int) -> RunConfig:
        p = dict(self.protocol)
        hyper = HyperParams(
            lambda1=p.pop("lambda1", 1.0), lambda2=p.pop("lambda2", 1.0),
            lambda3=p.pop("lambda3", 1.0), lambda4=p.pop("lambda4", 1.0),
            lambda5=p.pop("lambda5", 1.0), lambda6=p.pop("lambda6", 1.0),
            ramp_exponent=p.pop("ramp_exponent", 1.0))
        if "agg" in p:
            p["agg_mode"] = p.pop("agg")
        d = dict(self.dataset)
        if "name" in d:
            d["dataset"] = d.pop("name")
        try:
            return RunConfig(seed=seed, hyper=hyper, **p, **d)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


def _check_section(name: str, table: dict) -> dict:
    known = _SECTIONS[name]
    out = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        want = known[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise ConfigError(f"[{name}] {key} must be {want.__name__}, "
                              f"got {type(value).__name__}")
        out[key] = value
    return out


def _validate(doc: dict) -> ExperimentFile:
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    exp = _check_section("experiment", doc.get("experiment", {}))
    method = exp.get("method", "fedmdcg")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    seeds = exp.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                            for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    protocol = _check_section("protocol", doc.get("protocol", {}))
    if "agg" in protocol and protocol["agg"] not in AGG_MODES:
        raise ConfigError(f"agg must be one of {AGG_MODES}")
    ef = ExperimentFile(
        method=method, seeds=list(seeds),
        output_dir=exp.get("output_dir", "out"),
        protocol=protocol,
        dataset=_check_section("dataset", doc.get("dataset", {})),
        attack=_check_section("attack", doc.get("attack", {})),
        toyviz=_check_section("toyviz", doc.get("toyviz", {})),
    )
    ef.run_config(ef.seeds[0])  # fail fast on bad values
    return ef


def load_experiment(path, overrides: list[str] | None = None) -> ExperimentFile:
    """Parse, apply overrides and validate an experiment file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    for item in overrides or []:
        doc = apply_override(doc, item)
    return _validate(doc)


def apply_override(doc: dict, item: str) -> dict:
    """Apply one ``key=value`` or ``section.key=value`` override."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"override names unknown section {section!r}")
    else:
        hits = [s for s, keys in _SECTIONS.items() if key in keys]
        if not hits:
            raise ConfigError(f"override key {key!r} matches no known setting")
        if len(hits) > 1:
            raise ConfigError(
                f"override key {key!r} is ambiguous across sections {hits}; "
                f"qualify it as section.key")
        section, name = hits[0], key
    doc.setdefault(section, {})[name] = value
    return doc
