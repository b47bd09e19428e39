"""JSON experiment configs with strict schema validation.

Configs are validated before any tensor work: unknown keys are rejected
(additionalProperties false everywhere) so typos fail fast instead of
silently falling back to defaults.
"""

import json

import jsonschema

from .training import TrainConfig
from .unfolding import UnfoldConfig

__all__ = [
    "ConfigError", "EXPERIMENT_SCHEMA", "THEORY_SCHEMA",
    "validate_config", "load_config",
    "unfold_config_from", "train_config_from",
]


class ConfigError(ValueError):
    """Config file missing, unparsable, or schema-invalid."""


_SCHEDULE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "inverse-sqrt", "step-decay"]},
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "lipschitz": {"type": "number", "exclusiveMinimum": 0},
        "factor": {"type": "number", "exclusiveMinimum": 0},
        "period": {"type": "integer", "minimum": 1},
    },
}

_PROBLEM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "size", "components"],
    "properties": {
        "kind": {"enum": ["radon", "conv"]},
        "size": {"type": "integer", "minimum": 4},
        "components": {"type": "integer", "minimum": 1},
        "detectors": {"type": "integer", "minimum": 1},
        "angle_jitter_deg": {"type": "number", "minimum": 0},
        "bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "snr_db": {"oneOf": [{"type": "number"}, {"const": "inf"},
                             {"type": "null"}]},
        "init": {"enum": ["bp", "bp-mean", "fbp"]},
    },
}

_UNFOLD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["q_steps", "gamma"],
    "properties": {
        "q_steps": {"type": "integer", "minimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "tau0": {"type": "number"},
        "minibatch": {"oneOf": [{"type": "integer", "minimum": 1},
                                {"const": "full"}]},
        "mode": {"enum": ["stochastic", "full-batch"]},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["epochs", "schedule"],
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "schedule": _SCHEDULE_SCHEMA,
        "loss": {"const": "mse"},
        "seed": {"type": "integer", "minimum": 0},
        "snapshot_period": {"type": "integer", "minimum": 1},
        "grad_trace_period": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["sgd", "adam"]},
        "clip_norm": {"type": "number", "exclusiveMinimum": 0},
        "image_minibatch": {"type": "integer", "minimum": 1},
        "freeze_theta": {"type": "boolean"},
    },
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "unfold", "train"],
    "properties": {
        "schema_version": {"const": 1},
        "problem": _PROBLEM_SCHEMA,
        "unfold": _UNFOLD_SCHEMA,
        "train": _TRAIN_SCHEMA,
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "data": {"type": "string"},
                "out": {"type": "string"},
                "checkpoint": {"type": "string"},
                "warm_start": {"type": "string"},
            },
        },
    },
}

THEORY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "b_list": {"type": "array", "minItems": 1,
                   "items": {"oneOf": [{"type": "integer", "minimum": 1},
                                       {"const": "full"}]}},
        "k_list": {"type": "array", "minItems": 1,
                   "items": {"type": "integer", "minimum": 1}},
        "seeds": {"type": "array", "minItems": 1,
                  "items": {"type": "integer", "minimum": 0}},
        "root_seed": {"type": "integer", "minimum": 0},
        "n_draws": {"type": "integer", "minimum": 10000},
        "out": {"type": "string"},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"type": "integer", "minimum": 4},
                "n_components": {"type": "integer", "minimum": 1},
                "model_seed": {"type": "integer", "minimum": 0},
                "q_steps": {"type": "integer", "minimum": 0},
                "gamma": {"type": "number", "exclusiveMinimum": 0},
                "tau0": {"type": "number"},
                "m_samples": {"type": "integer", "minimum": 1},
                "data_seed": {"type": "integer", "minimum": 0},
                "snr_db": {"oneOf": [{"type": "number"}, {"type": "null"}]},
                "net_scale": {"type": "number", "exclusiveMinimum": 0},
                "lipschitz": {"type": "number", "exclusiveMinimum": 0},
                "trace_points": {"type": "integer", "minimum": 2},
            },
        },
    },
}


def validate_config(cfg, schema=EXPERIMENT_SCHEMA):
    """Validate a parsed config dict. Raises ConfigError with the JSON path
    of the offending key."""
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {err.message}") \
            from err
    return cfg


def load_config(path, schema=EXPERIMENT_SCHEMA):
    # OSError propagates: an unreadable file is an I/O failure, not a bad
    # config.
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") \
                from err
    return validate_config(cfg, schema)


def unfold_config_from(section, n_components):
    """UnfoldConfig from the "unfold" config section. minibatch "full"
    selects the deterministic full-batch mode over all components."""
    mb = section.get("minibatch", "full")
    if mb == "full":
        minibatch = n_components
        mode = section.get("mode", "full-batch")
    else:
        minibatch = int(mb)
        mode = section.get("mode", "stochastic")
    return UnfoldConfig(q_steps=int(section["q_steps"]),
                        gamma=float(section["gamma"]),
                        minibatch=minibatch, mode=mode,
                        seed=int(section.get("seed", 0)))


def train_config_from(section):
    keys = ("epochs", "schedule", "loss", "seed", "snapshot_period",
            "grad_trace_period", "optimizer", "clip_norm",
            "image_minibatch", "freeze_theta")
    return TrainConfig(**{k: section[k] for k in keys if k in section})
