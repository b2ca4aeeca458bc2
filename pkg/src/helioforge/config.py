"""Experiment configuration: JSON schema, validation with path-qualified
messages, and resolution of every default."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

import jsonschema

from .data import METHODS
from .models import CONDITION_MODES, SunsetConfig
from .partition import FRACTIONS
from .training import STRATEGIES, TrainConfig


class ConfigError(ValueError):
    pass


_day_list = {"type": "array", "items": {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}$"}}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "helioforge experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["strategy", "sites", "output"],
    "properties": {
        "strategy": {"enum": ["local", "global", "transfer"]},
        "sites": {"type": "array", "minItems": 1, "items": {"type": "string", "minLength": 1}},
        "target_site": {"type": "string", "minLength": 1},
        "source_checkpoints": {"type": "string", "minLength": 1},
        "transfer_strategy": {"enum": list(STRATEGIES)},
        "fraction_pct": {"enum": list(FRACTIONS)},
        "condition_mode": {"enum": list(CONDITION_MODES)},
        "normalization_method": {"enum": list(METHODS)},
        "output": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"type": "integer", "minimum": 4, "multipleOf": 4},
                "frames": {"const": 8},
                "lag_len": {"const": 8},
                "conv_filters": {"type": "array", "minItems": 2, "maxItems": 2,
                                 "items": {"type": "integer", "minimum": 1}},
                "fc_width": {"type": "integer", "minimum": 1},
                "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "patience": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "precision": {"enum": ["f32", "f64"]},
                "folds": {"type": "integer", "minimum": 2},
                "eval_batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stride_minutes": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "n_sunny": {"type": "integer", "minimum": 1},
                "n_cloudy": {"type": "integer", "minimum": 1},
                "sunny_days": _day_list,
                "cloudy_days": _day_list,
                "day_count": {"type": "integer", "minimum": 4},
                "image_size": {"type": "integer", "minimum": 4, "multipleOf": 4},
            },
        },
    },
    "allOf": [
        {
            "if": {"properties": {"strategy": {"const": "transfer"}}},
            "then": {"required": ["source_checkpoints", "transfer_strategy", "target_site"]},
            "else": {"not": {"anyOf": [{"required": ["source_checkpoints"]}, {"required": ["transfer_strategy"]}]}},
        },
    ],
}

DEFAULTS = {
    "fraction_pct": 100,
    "condition_mode": "none",
    "normalization_method": "std",
    "seed": 0,
    "data": {"stride_minutes": 2, "n_sunny": 10, "n_cloudy": 10, "day_count": 60, "image_size": 32},
}


def _path(error: jsonschema.ValidationError) -> str:
    return "config" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def _message(error: jsonschema.ValidationError) -> str:
    if error.validator in ("if", "then", "else", "not", "allOf"):
        return ("transfer needs source_checkpoints, transfer_strategy and target_site; "
                "other strategies must not set source_checkpoints or transfer_strategy")
    return error.message


def validate_config(raw: dict) -> dict:
    """Check ``raw`` against the schema and the model/train invariants and
    return the fully resolved config (all defaults written out)."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {_message(e)}" for e in errors))
    cfg = copy.deepcopy(raw)
    for key, value in DEFAULTS.items():
        if isinstance(value, dict):
            cfg[key] = {**value, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, value)
    if cfg["strategy"] == "global":
        if len(cfg["sites"]) < 2:
            raise ConfigError("config.sites: a global model needs at least two sites")
        if cfg["condition_mode"] != "none" and len(cfg["sites"]) != 2:
            raise ConfigError("config.condition_mode: conditioned models support exactly two sites")
    elif cfg["condition_mode"] != "none":
        raise ConfigError("config.condition_mode: only global models are conditioned")
    if cfg["strategy"] == "local" and len(cfg["sites"]) != 1 and "target_site" not in cfg:
        raise ConfigError("config.target_site: required when a local run lists several sites")
    if ("sunny_days" in cfg["data"]) != ("cloudy_days" in cfg["data"]):
        raise ConfigError("config.data: sunny_days and cloudy_days must be given together")

    model = {**cfg.get("model", {}), "image_size": cfg.get("model", {}).get("image_size", cfg["data"]["image_size"])}
    if "conv_filters" in model:
        model["conv_filters"] = tuple(model["conv_filters"])
    try:
        mcfg = SunsetConfig.test_profile(**model, condition_mode=cfg["condition_mode"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.model: {exc}") from exc
    try:
        tcfg = TrainConfig(**{"seed": cfg["seed"], **cfg.get("train", {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.train: {exc}") from exc
    cfg["model"] = mcfg.to_dict()
    cfg["train"] = tcfg.to_dict()
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    return validate_config(raw)


def model_config(cfg: dict) -> SunsetConfig:
    return SunsetConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in names})
