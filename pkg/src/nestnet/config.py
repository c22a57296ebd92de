"""Run configuration: one JSON document describing data, model, grid and
training, validated against a strict schema before any work starts."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .data import ToyCorpus, generate_corpus
from .encoder import EncoderConfig, SubnetSpec
from .supernet import Grid
from .trainer import MODES, STYLES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


_POS_INT = {"type": "integer", "minimum": 1}
_INT_LIST = {"type": "array", "items": _POS_INT, "minItems": 1}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "model", "grid", "train"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["seed"],
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "splits": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}, "minProperties": 1},
                "len_range": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
                "vocab": {"type": "integer", "minimum": 2},
                "d_in": _POS_INT,
                "frames_per_token": _POS_INT,
                "noise_sigma": {"type": "number", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": _POS_INT,
                "heads": _POS_INT,
                "conv_kernel": _POS_INT,
                "dec_ffn": {"type": "integer", "minimum": 0},
                "policy": {"enum": ["leading", "l2norm"]},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["depths", "widths", "precisions"],
            "properties": {"depths": _INT_LIST, "widths": _INT_LIST, "precisions": _INT_LIST},
        },
        "baseline": {"type": "string"},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["seed"],
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "total_steps": _POS_INT,
                "peak_lr": {"type": "number", "exclusiveMinimum": 0},
                "warmup_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "minItems": 2, "maxItems": 2},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "mode": {"enum": list(MODES)},
                "style": {"enum": list(STYLES)},
                "lambda_ctc": {"type": "number", "minimum": 0, "maximum": 1},
                "sample_k": _POS_INT,
                "clip_norm": {"type": "number", "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
        "output_dir": {"type": "string"},
    },
}

DATA_DEFAULTS = {
    "splits": {"train": 2000, "dev": 200, "test": 200},
    "len_range": [3, 8],
    "vocab": 8,
    "d_in": 16,
    "frames_per_token": 3,
    "noise_sigma": 0.5,
}
MODEL_DEFAULTS = {"d_model": 32, "heads": 4, "conv_kernel": 5, "dec_ffn": 0, "policy": "leading"}


@dataclass
class RunConfig:
    data: dict
    model: dict
    grid: Grid
    train: dict
    baseline: SubnetSpec
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        validate(raw)
        data = {**DATA_DEFAULTS, **raw["data"]}
        model = {**MODEL_DEFAULTS, **raw.get("model", {})}
        grid = Grid.from_dict(raw["grid"])
        lo, hi = data["len_range"]
        if lo > hi:
            raise ConfigError("len_range must be [low, high] with low <= high", "data.len_range")
        if model["d_model"] % model["heads"]:
            raise ConfigError("d_model must be divisible by heads", "model.heads")
        if model["conv_kernel"] % 2 == 0:
            raise ConfigError("conv_kernel must be odd", "model.conv_kernel")
        try:
            baseline = SubnetSpec.parse(raw.get("baseline", f"{grid.depths[-1]}-{grid.widths[-1]}-32bit"))
        except ValueError as exc:
            raise ConfigError(str(exc), "baseline") from exc
        try:
            TrainConfig(**raw["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "train") from exc
        return cls(data, model, grid, dict(raw["train"]), baseline, raw.get("output_dir", "runs"))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(raw)

    def corpus(self) -> ToyCorpus:
        d = self.data
        return generate_corpus(
            d["seed"], sum(d["splits"].values()), d["len_range"], d["vocab"], d["d_in"],
            d["frames_per_token"], d["noise_sigma"], d["splits"],
        )

    def encoder_config(self, spec: SubnetSpec | None = None) -> EncoderConfig:
        m = self.model
        depth = max(self.grid.depths[-1], self.baseline.depth) if spec is None else spec.depth
        width = max(self.grid.widths[-1], self.baseline.width) if spec is None else spec.width
        return EncoderConfig(
            d_in=self.data["d_in"], d_model=m["d_model"], depth_max=depth, ffn_max=width,
            heads=m["heads"], conv_kernel=m["conv_kernel"], vocab=self.data["vocab"] + 2, dec_ffn=m["dec_ffn"],
        )

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.train, **overrides})

    def to_dict(self) -> dict:
        return {
            "data": copy.deepcopy(self.data),
            "model": dict(self.model),
            "grid": self.grid.to_dict(),
            "baseline": str(self.baseline),
            "train": copy.deepcopy(self.train),
            "output_dir": self.output_dir,
        }


def validate(raw: Mapping) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = next(k for k in err.validator_value if k not in err.instance)
        path = f"{path}.{missing}" if path else missing
        raise ConfigError(f"missing required field '{path}'", path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        name = f"{path}.{extra[0]}" if path else extra[0]
        raise ConfigError(f"unknown field '{name}'", name)
    raise ConfigError(f"{path or '<root>'}: {err.message}", path or None)
