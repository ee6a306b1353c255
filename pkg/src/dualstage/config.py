"""Run configuration: JSON file -> validated dataclasses.

The schema rejects unknown fields everywhere (a silently ignored typo in an
experiment config is the classic failure mode), then cross-field invariants
are checked before any work starts: one image size shared by both backbones
and the preprocessing target, divisibility of patch grids and windows, and a
consistent label count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import jsonschema

from .data import DEFAULT_LABELS, PreprocessConfig, check_vocabulary
from .errors import ConfigError
from .swin import SwinConfig
from .train import TrainConfig
from .vit import ViTConfig

_POS_INT = {"type": "integer", "minimum": 1}
_UNIT = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_STATS = {
    "type": ["array", "null"],
    "items": {"type": "number"},
    "minItems": 3,
    "maxItems": 3,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "data", "train"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["vit", "swin"],
            "properties": {
                "vit": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "image_size": _POS_INT,
                        "patch_size": _POS_INT,
                        "embed_dim": _POS_INT,
                        "depth": {"type": "integer", "minimum": 0},
                        "num_heads": _POS_INT,
                        "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "swin": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "image_size": _POS_INT,
                        "patch_size": _POS_INT,
                        "embed_dim": _POS_INT,
                        "depths": {"type": "array", "items": _POS_INT, "minItems": 1},
                        "num_heads": {"type": "array", "items": _POS_INT, "minItems": 1},
                        "window_size": _POS_INT,
                        "use_relative_bias": {"type": "boolean"},
                        "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "vocabulary": {
                    "type": "array",
                    "items": {"type": "string", "minLength": 1},
                    "minItems": 1,
                },
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["manifest"],
            "properties": {
                "manifest": {"type": "string", "minLength": 1},
                "image_root": {"type": ["string", "null"]},
                "target_size": _POS_INT,
                "normalization": {"enum": ["unit-range", "dataset-stats"]},
                "hflip_probability": _UNIT,
                "channel_mean": _STATS,
                "channel_std": _STATS,
                "on_decode_error": {"enum": ["abort", "skip"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "minimum": 0.0},
                "beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _POS_INT,
                "seed": {"type": "integer", "minimum": 0},
                "precision": {"enum": ["float32", "float64"]},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass
class RunConfig:
    vit: ViTConfig
    swin: SwinConfig
    vocabulary: list[str]
    manifest: str
    image_root: str | None
    preprocess: PreprocessConfig
    train: TrainConfig


def _field_path(error: jsonschema.ValidationError) -> str:
    return "$" + "".join(
        f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path
    )


def parse_run_config(payload: dict) -> RunConfig:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(payload), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config {_field_path(e)}: {e.message}")
    model = payload["model"]
    data = payload["data"]
    vit_cfg = ViTConfig(**model["vit"])
    swin_raw = dict(model["swin"])
    for key in ("depths", "num_heads"):
        if key in swin_raw:
            swin_raw[key] = tuple(swin_raw[key])
    swin_cfg = SwinConfig(**swin_raw)
    vocabulary = check_vocabulary(model.get("vocabulary", DEFAULT_LABELS))
    preprocess = PreprocessConfig(
        target_size=data.get("target_size", vit_cfg.image_size),
        normalization=data.get("normalization", "unit-range"),
        hflip_probability=data.get("hflip_probability", 0.5),
        channel_mean=tuple(data["channel_mean"]) if data.get("channel_mean") else None,
        channel_std=tuple(data["channel_std"]) if data.get("channel_std") else None,
        on_decode_error=data.get("on_decode_error", "abort"),
    )
    train_cfg = TrainConfig(**payload.get("train", {}))

    if vit_cfg.image_size != swin_cfg.image_size:
        raise ConfigError(
            "config $.model: vit.image_size "
            f"{vit_cfg.image_size} != swin.image_size {swin_cfg.image_size}"
        )
    if preprocess.target_size != vit_cfg.image_size:
        raise ConfigError(
            f"config $.data.target_size: {preprocess.target_size} does not match "
            f"model image size {vit_cfg.image_size}"
        )
    return RunConfig(
        vit=vit_cfg,
        swin=swin_cfg,
        vocabulary=vocabulary,
        manifest=data["manifest"],
        image_root=data.get("image_root"),
        preprocess=preprocess,
        train=train_cfg,
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path}: top level must be a JSON object")
    return parse_run_config(payload)
