"""Run configuration: schema validation, defaults and run manifests."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

from . import __version__
from .errors import ConfigError
from .hierarchy import DEFAULT_BUDGET
from .series import canonical_json

REQUIRED = object()
WINDOWS = ("none", "cosine", "exponential")


@dataclass(frozen=True)
class Field:
    kind: type | tuple
    default: Any = REQUIRED
    check: Callable[[Any], str | None] | None = None


def _positive(v):
    return None if v > 0 else "must be > 0"


def _nonnegative(v):
    return None if v >= 0 else "must be >= 0"


def _at_least(n):
    return lambda v: None if v >= n else f"must be >= {n}"


def _one_of(*choices):
    return lambda v: None if v in choices else f"must be one of {', '.join(choices)}"


def _ascending_positive(v):
    if not v:
        return "must be a non-empty list"
    if any(x < 0 for x in v):
        return "entries must be >= 0"
    return None if list(v) == sorted(v) else "must be ascending"


SCHEMA: dict[str, dict[str, Field]] = {
    "bath": {
        "s": Field(float, REQUIRED, _positive),
        "alpha": Field(float, REQUIRED, _nonnegative),
    },
    "fit": {
        "t_max_wc": Field(float, 500.0, _positive),
        "NR": Field(int, 9, _at_least(1)),
        "NI": Field(int, 10, _at_least(1)),
        "osc_R": Field(int, 0, _nonnegative),
        "osc_I": Field(int, 0, _nonnegative),
        "linear_R": Field(int, 1, _nonnegative),
        "linear_I": Field(int, 1, _nonnegative),
        "n_samples": Field(int, 1500, _at_least(10)),
        "multistart": Field(int, 16, _at_least(1)),
        "seed": Field(int, 0),
        "tolerance": Field(float, 5e-5, _positive),
        "weighting": Field(str, "absolute", _one_of("absolute", "relative")),
        "file": Field((str, type(None)), None),
        "auto": Field(bool, True),
    },
    "system": {
        "omega_c_over_delta": Field(float, 5.0, _positive),
        "mu": Field(float, 1.0),
        "initial": Field(str, "up", _one_of("up", "ground")),
    },
    "hierarchy": {
        "H": Field(int, 4, _nonnegative),
        "rescale": Field(bool, False),
        "filter": Field(float, 0.0, _nonnegative),
        "budget": Field(int, DEFAULT_BUDGET, _at_least(1)),
    },
    "integration": {
        "dt": Field(float, 0.01, _positive),
        "t_eq": Field(float, 100.0, _positive),
        "t_resp": Field(float, 60.0, _positive),
        "stride": Field(int, 10, _at_least(1)),
    },
    "output": {
        "dir": Field(str, "out"),
        "window": Field(str, "cosine", _one_of(*WINDOWS)),
        "tau": Field((float, type(None)), None),
        "omega_max": Field(float, 4.0, _positive),
        "d_omega": Field(float, 0.02, _positive),
        "min_prominence": Field(float, 0.05, _nonnegative),
        "tail_fraction": Field(float, 0.1, _positive),
    },
    "sweep": {
        "s": Field(list, None, _ascending_positive),
        "alpha": Field(list, None, _ascending_positive),
        "kappa_threshold": Field(float, 0.02, _nonnegative),
        "prominence_threshold": Field(float, 0.05, _nonnegative),
        "omega_floor": Field(float, 0.2, _nonnegative),
        "workers": Field(int, 1, _at_least(1)),
    },
}

# sections that do not change any computed number
RUNTIME_ONLY = {("output", "dir"), ("sweep", "workers")}


def _coerce(path, value, kind):
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if value is None:
        if type(None) in kinds:
            return None
        raise ConfigError(path, "must not be null")
    if bool in kinds:
        if isinstance(value, bool):
            return value
        raise ConfigError(path, "must be true or false")
    if isinstance(value, bool):
        raise ConfigError(path, f"expected {kinds[0].__name__}, got a boolean")
    if float in kinds and isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if int in kinds:
        if isinstance(value, int):
            return value
        raise ConfigError(path, "must be an integer")
    if list in kinds:
        if not isinstance(value, list):
            raise ConfigError(path, "must be a list of numbers")
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}[{i}]", "must be a number")
            out.append(float(v))
        return out
    if str in kinds and isinstance(value, str):
        return value
    raise ConfigError(path, f"expected {kinds[0].__name__}, got {type(value).__name__}")


def validate(raw: dict, command: str = "relax") -> dict:
    """Return a fully resolved config; every default is filled in explicitly."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping of sections")
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
    sweeping = command == "sweep"
    out = {}
    for section, fields in SCHEMA.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(section, "must be a mapping")
        for key in given:
            if key not in fields:
                raise ConfigError(f"{section}.{key}", "unknown field")
        resolved = {}
        for key, spec in fields.items():
            path = f"{section}.{key}"
            if key in given:
                value = _coerce(path, given[key], spec.kind)
            elif spec.default is REQUIRED and not (sweeping and section == "bath"):
                raise ConfigError(path, "required field is missing")
            else:
                value = None if spec.default is REQUIRED else spec.default
            if value is not None and spec.check is not None:
                problem = spec.check(value)
                if problem:
                    raise ConfigError(path, problem)
            resolved[key] = value
        out[section] = resolved
    if sweeping:
        for key in ("s", "alpha"):
            if out["sweep"][key] is None:
                raise ConfigError(f"sweep.{key}", "required field is missing")
    integ = out["integration"]
    for key in ("t_eq", "t_resp"):
        n = integ[key] / integ["dt"]
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(f"integration.{key}", "must be an integer multiple of integration.dt")
    if out["output"]["window"] == "exponential" and not out["output"]["tau"]:
        raise ConfigError("output.tau", "exponential window needs tau > 0")
    if not out["fit"]["auto"] and not out["fit"]["file"]:
        raise ConfigError("fit.file", "required when fit.auto is false")
    return out


def load(path, command: str = "relax") -> dict:
    """Read a YAML or JSON config file (JSON is a YAML subset)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML/JSON: {exc}") from exc
    return validate(raw, command)


def computational(config: dict) -> dict:
    """The config without fields that only affect where or how fast things run."""
    return {sec: {k: v for k, v in vals.items() if (sec, k) not in RUNTIME_ONLY}
            for sec, vals in config.items()}


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def make_manifest(command: str, config: dict, created: str, **extra) -> dict:
    """Everything needed to regenerate an output file."""
    doc = {
        "tool": "sbheom",
        "version": __version__,
        "command": command,
        "config": computational(config),
        "units": {"time": "1/Delta", "frequency": "Delta",
                  "omega_c_over_delta": config["system"]["omega_c_over_delta"]},
        "created": created,
    }
    doc.update(extra)
    # round-trip through JSON so the in-memory and on-disk forms agree
    return json.loads(canonical_json(doc))


def config_from_manifest(manifest: dict, out_dir: str) -> dict:
    cfg = {sec: {k: v for k, v in vals.items() if v is not None}
           for sec, vals in manifest["config"].items()}
    cfg.setdefault("output", {})["dir"] = out_dir
    cfg.setdefault("sweep", {}).setdefault("workers", 1)
    return validate(cfg, manifest["command"])
