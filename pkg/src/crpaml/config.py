"""Pipeline configuration: one YAML file, environment overrides, flags.

Resolution order is defaults < file < CRPAML_<SECTION>_<KEY> environment
variables < command-line flags; the resolved mapping is hashed so every
artifact can carry the config that produced it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

DEFAULTS: dict = {
    "paths": {
        "workdir": "runs/default",
        "input_csv": None,  # defaults to the synth output inside workdir
        "rate_table": None,  # defaults to the built-in static table
    },
    "synth": {
        "n_accounts": 1000,
        "n_background_txns": 50_000,
        "illicit_ratio": 0.002,
        "seed": 1,
        "time_span_days": 10,
        "pattern_mix": {
            "fan_in": 1.0,
            "fan_out": 1.0,
            "gather_scatter": 1.0,
            "cycle": 1.0,
            "stack": 1.0,
        },
    },
    "profile": {"volume_buckets": 4, "count_buckets": 4, "vocab_size": 64},
    "risk": {"smoothing": 1.0},
    "split": {"seed": 7140, "test_fraction": 0.2},
    "network": {
        "context_hidden": 64,
        "context_out": 32,
        "encoder_width": 128,
        "decoder_width": 64,
        "activity_l2": 1e-4,
        "focal_alpha": 0.25,
        "focal_gamma": 3.0,
        "learning_rate": 0.001,
        "batch_size": 1024,
        "max_epochs": 100,
        "patience": 10,
        "decision_threshold": 0.5,
    },
    "train": {"seeds": [1, 2, 3, 4, 5], "risk_filter": True},
    "serve": {
        "host": "127.0.0.1",
        "port": 8400,
        "substantial_fraction": 0.05,
        "suspect": "sender",  # sender | receiver | both
    },
}

ENV_PREFIX = "CRPAML_"


class ConfigError(ValueError):
    """Configuration file or override cannot be used."""


def _merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if key not in out:
            raise ConfigError(f"unknown config key: {path}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "pattern_mix":
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_env(resolved: dict, environ: dict[str, str]) -> dict:
    out = copy.deepcopy(resolved)
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        remainder = name[len(ENV_PREFIX):]
        section, _, key = remainder.partition("_")
        section = section.lower()
        key = key.lower()
        if section not in out or key not in out[section]:
            raise ConfigError(f"environment override names unknown key: {name}")
        out[section][key] = yaml.safe_load(raw)
    return out


class PipelineConfig:
    def __init__(self, resolved: dict):
        self.data = resolved

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        environ: dict[str, str] | None = None,
        flag_overrides: dict | None = None,
    ) -> "PipelineConfig":
        resolved = copy.deepcopy(DEFAULTS)
        if path is not None:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            resolved = _merge(resolved, loaded)
        resolved = _apply_env(resolved, environ if environ is not None else dict(os.environ))
        for section, values in (flag_overrides or {}).items():
            for key, value in values.items():
                resolved[section][key] = value
        return cls(resolved)

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    @property
    def workdir(self) -> Path:
        return Path(self.data["paths"]["workdir"])

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def save_resolved(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.data, sort_keys=True))
