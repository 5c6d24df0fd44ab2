"""Declarative run configuration: schema validation, overrides, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "city": {
        "n_regions": 64,
        "distance_mode": "planar",
    },
    "data": {
        "n_agents": 300,
        "deviation": 0.1,
        "slot_minutes": 30,
        "train_fraction": 1.0,
    },
    "planner": {
        "k": 8,
        "epochs": 20,
        "lr": 1e-3,
        "time_weight": 1.0,
        "label_smoothing": 0.0,
        "remote_url": None,
    },
    "embedding": {
        "layers": 3,
        "hidden": 32,
        "kernel": 3,
        "dilations": [1, 2, 4],
        "out_dim": 128,
        "epochs": 6,
        "lr": 1e-3,
        "batch_size": 64,
        "adapt_fraction": 0.05,
        "adapt_epochs": 60,
    },
    "generator": {
        "blocks": 4,
        "heads": 8,
        "d_model": 128,
        "ffn": 512,
        "diffusion_steps": 100,
        "beta_start": 0.001,
        "beta_end": 0.1,
        "train_steps": 600,
        "lr": 1e-3,
        "batch_size": 64,
    },
    "evaluation": {
        "bins": 50,
        "epr_rho": 0.6,
        "epr_gamma": 0.21,
    },
    "privacy": {
        "alarm_threshold": 0.8,
        "sim_subsample": 200,
        "mix_ratios": [0.0, 0.5, 1.0],
    },
    "seeds": {
        "master": 0,
    },
    "paths": {
        "out_dir": "runs/default",
        "seeds_csv": None,
        "raw_trajectories": None,
    },
}


# (type, validator) per dotted path; validators receive the value
_SCHEMA = {
    "city.n_regions": (int, lambda v: v >= 1),
    "city.distance_mode": (str, lambda v: v in ("planar", "haversine")),
    "data.n_agents": (int, lambda v: v >= 1),
    "data.deviation": (float, lambda v: 0.0 <= v <= 1.0),
    "data.slot_minutes": (int, lambda v: v >= 1 and 1440 % v == 0),
    "data.train_fraction": (float, lambda v: 0.0 < v <= 1.0),
    "planner.k": (int, lambda v: v >= 1),
    "planner.epochs": (int, lambda v: v >= 1),
    "planner.lr": (float, lambda v: v > 0),
    "planner.time_weight": (float, lambda v: v >= 0),
    "planner.label_smoothing": (float, lambda v: 0.0 <= v < 1.0),
    "planner.remote_url": ((str, type(None)), lambda v: True),
    "embedding.layers": (int, lambda v: v >= 1),
    "embedding.hidden": (int, lambda v: v >= 1),
    "embedding.kernel": (int, lambda v: v >= 1 and v % 2 == 1),
    "embedding.dilations": (list, lambda v: all(isinstance(d, int) and d >= 1 for d in v)),
    "embedding.out_dim": (int, lambda v: v >= 1),
    "embedding.epochs": (int, lambda v: v >= 1),
    "embedding.lr": (float, lambda v: v > 0),
    "embedding.batch_size": (int, lambda v: v >= 1),
    "embedding.adapt_fraction": (float, lambda v: 0.0 < v <= 1.0),
    "embedding.adapt_epochs": (int, lambda v: v >= 1),
    "generator.blocks": (int, lambda v: v >= 1),
    "generator.heads": (int, lambda v: v >= 1),
    "generator.d_model": (int, lambda v: v >= 1),
    "generator.ffn": (int, lambda v: v >= 1),
    "generator.diffusion_steps": (int, lambda v: v >= 2),
    "generator.beta_start": (float, lambda v: 0 < v < 1),
    "generator.beta_end": (float, lambda v: 0 < v < 1),
    "generator.train_steps": (int, lambda v: v >= 1),
    "generator.lr": (float, lambda v: v > 0),
    "generator.batch_size": (int, lambda v: v >= 1),
    "evaluation.bins": (int, lambda v: v >= 2),
    "evaluation.epr_rho": (float, lambda v: 0.0 <= v <= 1.0),
    "evaluation.epr_gamma": (float, lambda v: v >= 0.0),
    "privacy.alarm_threshold": (float, lambda v: 0.0 < v <= 1.0),
    "privacy.sim_subsample": (int, lambda v: v >= 1),
    "privacy.mix_ratios": (list, lambda v: all(isinstance(r, (int, float))
                                               and 0.0 <= r <= 1.0 for r in v)),
    "seeds.master": (int, lambda v: v >= 0),
    "paths.out_dir": (str, lambda v: len(v) > 0),
    "paths.seeds_csv": ((str, type(None)), lambda v: True),
    "paths.raw_trajectories": ((str, type(None)), lambda v: True),
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def validate_config(cfg: dict) -> dict:
    """Validate against the schema; raises ConfigError with a dotted path."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    for section, body in cfg.items():
        if section not in DEFAULT_CONFIG:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: must be an object")
        for key, value in body.items():
            path = f"{section}.{key}"
            if path not in _SCHEMA:
                raise ConfigError(f"{path}: unknown field")
            typ, check = _SCHEMA[path]
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
                cfg[section][key] = value
            if not isinstance(value, typ) or isinstance(value, bool) and typ is int:
                raise ConfigError(f"{path}: expected {typ}, got {type(value).__name__}")
            if not check(value):
                raise ConfigError(f"{path}: invalid value {value!r}")
    merged = default_config()
    for section, body in cfg.items():
        merged[section].update(body)
    if merged["generator"]["d_model"] != merged["embedding"]["out_dim"]:
        raise ConfigError("generator.d_model: must equal embedding.out_dim")
    if merged["generator"]["d_model"] % merged["generator"]["heads"] != 0:
        raise ConfigError("generator.heads: must divide generator.d_model")
    if len(merged["embedding"]["dilations"]) != merged["embedding"]["layers"]:
        raise ConfigError("embedding.dilations: needs one entry per layer")
    if not merged["generator"]["beta_start"] < merged["generator"]["beta_end"]:
        raise ConfigError("generator.beta_start: must be below beta_end")
    return merged


def load_config(path: str | Path | None, overrides=()) -> dict:
    """Load, apply --set overrides, validate, and merge with defaults."""
    if path is None:
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"{key}: override keys are section.field")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.setdefault(parts[0], {})[parts[1]] = value
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
