"""Run configuration: defaults, JSON schema validation, config hashing.

One JSON document with model / data / train / eval / runtime sections fully
determines a run together with its seeds. Unknown keys are rejected.
"""

import copy
import hashlib
import json

import jsonschema

from .errors import ConfigError

DEFAULTS = {
    "model": {
        "c_z": 4,
        "downsample_factor": 8,
        "codec_channels": 32,
        "base_channels": 64,
        "channel_mults": [1, 2],
        "blocks_per_level": 1,
        "attention_heads": 4,
        "d_cond": 64,
        "t_emb_dim": 128,
        "norm_groups": 8,
        "cond_length": 8,
        "feature_source": "final_decoder",
        "head_width": 32,
        "sub_input": "aux_only",
        "timestep": 1,
        "schedule": {"t_max": 1000, "beta_start": 8.5e-4, "beta_end": 1.2e-2},
        "init_seed": 20,
    },
    "data": {
        "root": "data",
        "length": 40,
        "splits": {"train": 200, "val": 10, "test_bright": 20, "test_dark": 20, "test_rgbn": 12},
    },
    "train": {
        "batch_size": 8,
        "steps_codec": 1200,
        "steps_stage1": 1500,
        "steps_stage2": 600,
        "lr_backbone": 1e-4,
        "lr_head": 1e-3,
        "weight_decay": 1e-3,
        "betas": [0.9, 0.999],
        "floor_frac": 0.01,
        "lambda_giou": 2.0,
        "lambda_l1": 5.0,
        "caption_dropout": 0.5,
        "seed": 1234,
        "val_interval": 100,
        "grad_clip": 1.0,
        "rgb_only": False,
        "no_zero_init": False,
        "tune_unet_stage2": False,
    },
    "eval": {"report_px": 20},
    "runtime": {"window_weight": 0.49, "min_box_px": 2.0},
}


def _schema_for(value):
    if isinstance(value, dict):
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _schema_for(v) for k, v in value.items()},
        }
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, (int, float)):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        return {"type": "array"}
    raise AssertionError(f"unhandled default type {type(value)}")


SCHEMA = _schema_for(DEFAULTS)


def _merge(base, override, path="config"):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {path}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}.{key} must be an object")
            out[key] = _merge(base[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def validate_config(doc=None):
    """Merge a partial config over the defaults and schema-validate it."""
    merged = _merge(DEFAULTS, doc or {})
    try:
        jsonschema.validate(merged, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    return merged


def load_config(path=None):
    if path is None:
        return validate_config({})
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(doc)


def config_hash(cfg):
    """Short stable hash embedded in output artifacts for provenance."""
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
