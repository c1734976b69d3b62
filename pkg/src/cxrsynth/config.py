"""Declarative run configuration (JSON, versioned schema)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from .classifier import TrainingConfig
from .data_core import SplitSpec
from .translation import DiscriminatorSpec, GanHyperparams, GeneratorSpec

SCHEMA_VERSION = 1

# Stage order; each stage's seed is ``seed + STAGES.index(stage)``.
STAGES = ("ingest", "split", "balance", "train-gan", "synthesize", "train-clf", "evaluate", "compare", "embed")

_label_rule = {
    "type": "object",
    "minProperties": 1,
    "additionalProperties": {
        "type": "object",
        "required": ["label", "source_domain"],
        "properties": {
            "label": {"enum": ["negative", "positive"]},
            "source_domain": {"enum": ["normal", "pneumonia", "covid", "toy_a", "toy_b"]},
        },
        "additionalProperties": False,
    },
}

_spec_block = {"type": "object", "additionalProperties": {"type": "integer"}}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "task_name", "output_root", "dataset"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "task_name": {"type": "string", "minLength": 1},
        "seed": {"type": "integer"},
        "output_root": {"type": "string"},
        "image_size": {"type": "integer", "minimum": 8},
        "dataset": {
            "type": "object",
            "required": ["root", "label_rule"],
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string"},
                "label_rule": _label_rule,
                "patient_regex": {"type": ["string", "null"]},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "unit": {"enum": ["patient", "image"]},
            },
        },
        "gan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_cycle": {"type": "number", "minimum": 0},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number"},
                "batch_size": {"type": "integer", "minimum": 1},
                "total_steps": {"type": "integer", "minimum": 0},
                "adversarial_mode": {"enum": ["log", "least_squares"]},
                "image_pool_size": {"type": "integer", "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "direction": {"enum": ["AtoB", "BtoA"]},
                "generator": _spec_block,
                "discriminator": _spec_block,
            },
        },
        "secondary_synthetic": {"type": ["string", "null"]},
        "classifiers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["backbone"],
                "properties": {
                    "name": {"type": "string"},
                    "backbone": {"enum": ["vgg16", "resnet50", "densenet", "custom"]},
                    "include_real": {"type": "boolean"},
                    "include_G1": {"type": "boolean"},
                    "include_G2": {"type": "boolean"},
                    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                    "batch_size": {"type": "integer", "minimum": 1},
                    "early_stop_patience": {"type": "integer", "minimum": 0},
                    "early_stop_min_delta": {"type": "number", "minimum": 0},
                    "max_epochs": {"type": "integer", "minimum": 1},
                    "pretrained": {"type": "boolean"},
                    "densenet_depth": {"type": "integer"},
                    "custom_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                },
                "additionalProperties": False,
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"threshold": {"type": "number", "minimum": 0, "maximum": 1}},
        },
        "embedding": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "feature_source": {"enum": ["raw_pixels", "classifier_features"]},
                "classifier": {"type": ["string", "null"]},
                "n_neighbors": {"type": "integer", "minimum": 2},
                "min_dist": {"type": "number", "minimum": 0},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task_name: str
    dataset_root: Path
    label_rule: dict
    output_root: Path
    seed: int = 0
    image_size: int = 256
    patient_regex: str | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    gan: GanHyperparams = field(default_factory=GanHyperparams)
    gan_direction: str = "AtoB"
    checkpoint_every: int = 0
    secondary_synthetic: Path | None = None
    classifiers: list[TrainingConfig] = field(default_factory=list)
    threshold: float = 0.5
    embedding: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def stage_seed(self, stage: str) -> int:
        return self.seed + STAGES.index(stage)


def _resolve(base: Path, value: str) -> Path:
    p = Path(os.path.expandvars(value)).expanduser()
    return p if p.is_absolute() else (base / p).resolve()


def parse_run_config(data: dict, base_dir: str | Path = ".") -> RunConfig:
    """Validate against the schema, resolve paths, derive per-stage seeds.

    ``RUN_DATA_ROOT`` / ``RUN_OUTPUT_ROOT`` override the dataset and output
    roots.
    """
    try:
        jsonschema.validate(data, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid run config at {loc}: {exc.message}") from None

    base = Path(base_dir).resolve()
    seed = data.get("seed", 0)
    size = data.get("image_size", 256)
    ds = data["dataset"]
    dataset_root = _resolve(base, os.environ.get("RUN_DATA_ROOT", ds["root"]))
    output_root = _resolve(base, os.environ.get("RUN_OUTPUT_ROOT", data["output_root"]))
    if not dataset_root.is_dir():
        raise ConfigError(f"dataset root does not exist: {dataset_root}")

    split = data.get("split", {})
    gan = dict(data.get("gan", {}))
    direction = gan.pop("direction", "AtoB")
    checkpoint_every = gan.pop("checkpoint_every", 0)
    gen = GeneratorSpec(**gan.pop("generator", {}))
    disc = DiscriminatorSpec(**gan.pop("discriminator", {}))

    cfg = RunConfig(
        task_name=data["task_name"],
        dataset_root=dataset_root,
        label_rule=ds["label_rule"],
        output_root=output_root,
        seed=seed,
        image_size=size,
        patient_regex=ds.get("patient_regex"),
        gan_direction=direction,
        checkpoint_every=checkpoint_every,
        threshold=data.get("evaluation", {}).get("threshold", 0.5),
        embedding=data.get("embedding", {}),
        raw=data,
    )
    cfg.split = SplitSpec(
        train_fraction=split.get("train_fraction", 0.8),
        seed=cfg.stage_seed("split"),
        unit=split.get("unit", "patient"),
    )
    try:
        cfg.gan = GanHyperparams(
            seed=cfg.stage_seed("train-gan"), image_size=size, generator=gen, discriminator=disc, **gan
        )
        cfg.classifiers = [
            TrainingConfig(seed=cfg.stage_seed("train-clf"), image_size=size, **c)
            for c in data.get("classifiers", [])
        ]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    names = [c.config_id for c in cfg.classifiers]
    if len(set(names)) != len(names):
        raise ConfigError(f"classifier configs must have distinct names: {names}")
    if data.get("secondary_synthetic"):
        cfg.secondary_synthetic = _resolve(base, data["secondary_synthetic"])
        if not (cfg.secondary_synthetic / "manifest.jsonl").is_file():
            raise ConfigError(f"secondary synthetic set not found: {cfg.secondary_synthetic}")
    if any(c.include_G2 for c in cfg.classifiers) and cfg.secondary_synthetic is None:
        raise ConfigError("a classifier config sets include_G2 but no secondary_synthetic set is configured")
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_run_config(data, path.parent)


def with_overrides(cfg: TrainingConfig, **overrides) -> TrainingConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
