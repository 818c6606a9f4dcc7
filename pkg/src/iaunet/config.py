"""Flat run configuration shared by every CLI command.

Keys are ``section.field`` (``model.base_channels``, ``train.lr``, ...) built
from the config dataclasses, plus a few ``data.*``/``eval.*`` entries. Files
are validated against ``schemas/run_config.schema.json``; unknown keys are
rejected. ``python -m iaunet.config`` rewrites the committed schema files.
"""

import dataclasses
import json
import types
from importlib import resources
from pathlib import Path

import jsonschema

from .data.augment import AugmentationConfig
from .data.synth import SynthConfig
from .errors import ConfigurationError
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "aug": AugmentationConfig,
    "synth": SynthConfig,
}
NESTED = {"loss", "aug"}  # TrainConfig fields filled from their own sections

EXTRA_KEYS = {
    "data.manifest": (None, "Dataset manifest (JSON array of records)."),
    "data.pool": (None, "Hard-negative pool manifest; defaults to pool.json beside the manifest."),
    "eval.threshold": (0.5, "Foreground threshold on sigmoid probabilities."),
}

DOCS = {
    "model.in_channels": "Input image channels.",
    "model.num_classes": "Output channels: 1 for binary masks, K for K-class maps.",
    "model.base_channels": "Width of the first encoder stage; later stages double it.",
    "model.upsampler": "Decoder upsampling: bilinear (+1x1 conv) or transposed conv.",
    "model.embed_dim": "Embedding dimension.",
    "model.embed_conv_layers": "3x3 conv-BN-ReLU layers in the embedding head before pooling.",
    "loss.margin": "Triplet margin.",
    "loss.lam": "Weight of the triplet term; 0 trains a plain U-Net.",
    "loss.dice_smooth": "Additive smoothing in the soft Dice loss.",
    "loss.mode": "binary (BCE + Dice) or multiclass (cross-entropy + Dice).",
    "train.epochs": "Passes over the anchor records.",
    "train.batch_size": "Triplets per step.",
    "train.lr": "RMSProp learning rate.",
    "train.rmsprop_alpha": "Decay of the squared-gradient average.",
    "train.rmsprop_momentum": "Heavy-ball momentum.",
    "train.weight_decay": "L2 coefficient added to the gradient before the update.",
    "train.grad_clip_norm": "Global gradient-norm clipping threshold.",
    "train.hard_negative_prob": "Chance of drawing the negative from the hard-negative pool.",
    "train.seed": "Seed for initialization, batch order and sampling.",
    "train.dtype": "Floating-point precision of model and data.",
    "train.checkpoint_dir": "Where checkpoints go (set by the CLI from --out).",
    "train.log_every": "Write a log record every this many steps.",
    "aug.flip_prob": "Probability of each horizontal/vertical flip.",
    "aug.rotation_deg": "Maximum absolute rotation in degrees.",
    "aug.scale_min": "Lower bound of the random zoom.",
    "aug.scale_max": "Upper bound of the random zoom.",
    "aug.translate_frac": "Maximum shift as a fraction of the image size.",
    "aug.brightness": "Maximum relative brightness change.",
    "aug.contrast": "Maximum relative contrast change.",
    "aug.seed": "Extra seed mixed into augmentation draws.",
    "synth.num_images": "Scenes to generate.",
    "synth.image_size": "Scene side length in pixels (multiple of 16).",
    "synth.min_cells": "Fewest cells per scene.",
    "synth.max_cells": "Most cells per scene.",
    "synth.identity_count": "Cell textures: 0 is the target, the rest are distractors.",
    "synth.touching_prob": "Chance that a scene contains a touching target/distractor pair.",
    "synth.noise_sigma": "Std of additive pixel noise.",
    "synth.pool_size": "Hard-negative pool images (0 means num_images // 2).",
    "synth.seed": "Generator seed.",
}

ENUMS = {
    "model.upsampler": ["bilinear", "transposed"],
    "loss.mode": ["binary", "multiclass"],
    "train.dtype": ["float32", "float64"],
}


def _json_type(tp):
    if isinstance(tp, types.UnionType):
        return [_json_type(t) for t in tp.__args__]
    return {int: "integer", float: "number", str: "string", bool: "boolean",
            type(None): "null"}[tp]


def _fields():
    """``{key: (default, json type)}`` in a stable order."""
    out = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if cls is TrainConfig and f.name in NESTED:
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            out[f"{section}.{f.name}"] = (default, _json_type(f.type))
    for key, (default, _) in EXTRA_KEYS.items():
        out[key] = (default, "number" if isinstance(default, float) else ["string", "null"])
    return out


def defaults():
    return {k: v for k, (v, _) in _fields().items()}


def schema():
    props = {}
    for key, (default, jtype) in _fields().items():
        if jtype == "number":
            jtype = ["number", "integer"]
        prop = {"type": jtype, "default": default,
                "description": DOCS.get(key) or EXTRA_KEYS[key][1]}
        if key in ENUMS:
            prop["enum"] = ENUMS[key]
        props[key] = prop
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "iaunet run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": props,
    }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "iaunet metric report",
    "type": "object",
    "additionalProperties": False,
    "required": ["per_image", "aggregate", "fold_id"],
    "properties": {
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "dice", "iou"],
                "properties": {
                    "id": {"type": "string"},
                    "dice": {"type": "number", "minimum": 0, "maximum": 1},
                    "iou": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dice_mean", "dice_std", "iou_mean", "iou_std", "count"],
            "properties": {
                "dice_mean": {"type": "number", "minimum": 0, "maximum": 1},
                "dice_std": {"type": "number", "minimum": 0},
                "iou_mean": {"type": "number", "minimum": 0, "maximum": 1},
                "iou_std": {"type": "number", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
            },
        },
        "fold_id": {"type": ["integer", "null"]},
    },
}


def load_schema(name):
    return json.loads(resources.files("iaunet").joinpath("schemas", name).read_text())


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    """Validated flat mapping of every tunable with its default."""

    def __init__(self, values=None):
        self.values = defaults()
        if values:
            self.update(values)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"{path}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls(data)

    def update(self, mapping):
        merged = dict(self.values)
        merged.update(mapping)
        validator = jsonschema.Draft202012Validator(load_schema("run_config.schema.json"))
        errors = sorted(validator.iter_errors(merged), key=lambda e: list(e.path))
        if errors:
            e = errors[0]
            where = ".".join(str(p) for p in e.path) or "config"
            raise ConfigurationError(f"{where}: {e.message}")
        self.values = merged
        self.build()  # range checks live in the dataclasses
        return self

    def set(self, assignment):
        """Apply a ``key=value`` string (value parsed as JSON when possible)."""
        if "=" not in assignment:
            raise ConfigurationError(f"expected key=value, got {assignment!r}")
        key, text = assignment.split("=", 1)
        return self.update({key.strip(): _parse_value(text)})

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self):
        return ModelConfig(**self.section("model"))

    def loss_config(self):
        return LossConfig(**self.section("loss"))

    def aug_config(self):
        return AugmentationConfig(**self.section("aug"))

    def synth_config(self):
        return SynthConfig(**self.section("synth"))

    def train_config(self):
        return TrainConfig(**self.section("train"), loss=self.loss_config(), aug=self.aug_config())

    def build(self):
        return (self.model_config(), self.train_config(), self.synth_config())

    def to_dict(self):
        return dict(self.values)

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.values, indent=1) + "\n")


def write_schemas(directory=None):
    directory = Path(directory or Path(__file__).parent / "schemas")
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run_config.schema.json").write_text(json.dumps(schema(), indent=1) + "\n")
    (directory / "metric_report.schema.json").write_text(json.dumps(REPORT_SCHEMA, indent=1) + "\n")


if __name__ == "__main__":
    write_schemas()
