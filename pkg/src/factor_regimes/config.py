"""Run configuration: a YAML file with a fixed key schema plus dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .synthetic import FACTORS

CONFIG_ENV_VAR = "FACTOR_REGIMES_CONFIG"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "data": {
        "returns": None,
        "env": None,
        "input_kind": "returns",
        "schema": None,
    },
    "universe": {
        "market": "market",
        "factors": list(FACTORS),
        "rf": "rf",
        "env": ["vix", "y2", "y10"],
    },
    "features": {"windows": None},
    "jump_model": {"K": 2, "lam": 50.0, "kappa_sq": 9.5, "n_init": 10, "max_iter": 20, "tol": 1e-10},
    "grid": {
        "lambdas": [10.0, 20.0, 35.0, 50.0, 75.0, 100.0, 150.0],
        "kappa_sqs": [3.0, 5.5, 9.5, 14.0, 17.0],
    },
    "schedule": {
        "train_min_years": 8,
        "train_max_years": 12,
        "refit_months": 1,
        "validation_years": 6,
        "reselect_months": 6,
        "test_start": "2007-01-01",
        "test_end": None,
    },
    "allocation": {"delta": 2.5, "halflife": 126, "te_targets": [0.01, 0.02, 0.03, 0.04], "tc": 0.0005},
    "simulate": {"days": 6000, "p_stay": [0.998, 0.998], "mu": [0.10, -0.10], "vol": [0.06, 0.06], "rf": 0.02},
    "output_dir": "out",
    "seed": 0,
    "threads": 1,
}

# keys whose values are free-form mappings
_OPEN_KEYS = {("data", "schema"), ("features", "windows")}


def _merge(base: dict, new: Mapping, path=()) -> dict:
    for k, v in new.items():
        here = path + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key: {'.'.join(here)}")
        if isinstance(base[k], dict) and here not in _OPEN_KEYS:
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {'.'.join(here)} must be a mapping")
            _merge(base[k], v, here)
        else:
            base[k] = v
    return base


def _coerce(default, value):
    if isinstance(default, list) and not isinstance(value, list):
        return [value]
    return value


def set_dotted(cfg: dict, key: str, values: list[str]) -> None:
    """Apply a ``--a.b v1 [v2 ...]`` style override."""
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    parsed = []
    for v in values:
        for piece in v.split(","):
            if piece != "":
                parsed.append(yaml.safe_load(piece))
    if not parsed:
        raise ConfigError(f"no value given for {key}")
    default = node[parts[-1]]
    node[parts[-1]] = parsed if (len(parsed) > 1 or isinstance(default, list)) else parsed[0]


def load_config(path: str | Path | None = None, overrides: Mapping[str, list[str]] | None = None) -> dict:
    """Defaults, then the YAML file, then dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, Mapping):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, loaded)
    for k, v in (overrides or {}).items():
        set_dotted(cfg, k, v)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    te = cfg["allocation"]["te_targets"]
    te = _coerce([], te)
    if not te or any(not 0 < float(x) < 0.2 for x in te):
        raise ConfigError("allocation.te_targets must lie in (0, 0.2)")
    cfg["allocation"]["te_targets"] = [float(x) for x in te]
    for key in ("lambdas", "kappa_sqs"):
        cfg["grid"][key] = [float(x) for x in _coerce([], cfg["grid"][key])]
    if cfg["data"]["input_kind"] not in ("returns", "levels"):
        raise ConfigError("data.input_kind must be 'returns' or 'levels'")
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")


def config_hash(cfg: Mapping) -> str:
    """Stable digest of the settings that affect results.

    ``threads`` and ``output_dir`` are excluded so reruns elsewhere or with
    other parallelism produce identical artifacts.
    """
    relevant = {k: v for k, v in cfg.items() if k not in ("threads", "output_dir")}
    blob = json.dumps(relevant, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
