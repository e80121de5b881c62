"""Single JSON configuration document with strict schema validation.

Every run is driven by one document; unknown keys are rejected rather than
ignored, and dotted-key overrides (``trainer.variant=no_kd``) modify one
entry at a time. ``DEFAULT_CONFIG`` doubles as the published schema: every
configurable key appears there with its default value and type.

Seed precedence, lowest to highest: document value, ``MTVSSL_SEED``
environment variable, command-line override.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .seeding import canonical_hash
from .teacher import TeacherSpec
from .trainer import TrainConfig
from .video_data import AugmentConfig, SceneConfig

SEED_ENV_VAR = "MTVSSL_SEED"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {
        "source": "synthetic",  # "synthetic" | "directory"
        "data_dir": None,
        "manifest": "manifest.tsv",
        "test_manifest": None,
        "train_videos_per_action": 25,
        "test_videos_per_action": 8,
        "scene": {
            "num_actions": 8,
            "num_part_classes": 4,
            "frame_count": 40,
            "height": 32,
            "width": 32,
            "actor_scale": 0.42,
            "motion_period": 16.0,
            "motion_amplitude": 0.15,
            "background_range": [0.08, 0.22],
            "brightness_range": [0.9, 1.1],
        },
        "augment": {
            "out_height": 32,
            "out_width": 32,
            "crop_scale": [0.6, 1.0],
            "crop_aspect": [0.75, 1.3333333333],
            "flip_prob": 0.5,
            "brightness": [0.8, 1.2],
            "contrast": [0.8, 1.2],
            "saturation": [0.8, 1.2],
        },
    },
    "model": {
        "in_channels": 3,
        "encoder_channels": [8, 16, 32],
        "embed_dim": 128,
        "hidden_dim": 128,
        "proj_dim": 64,
        "seg_classes": 4,
        "seg_height": 16,
        "seg_width": 16,
        "decoder_grid": 4,
        "decoder_channels": 32,
    },
    "loss": {
        "margin": 0.15,
        "temperature": 0.1,
        "weight_kd": 1.0,
        "weight_motion": 1.0,
        "weight_appearance": 0.1,
        "queue_capacity": 32,
    },
    "teacher": {
        "kind": "oracle",  # "oracle" | "file" | "stub"
        "softening": 0.1,
        "manifest": None,
        "stub_seed": 0,
    },
    "trainer": {
        "variant": "full",  # "full" | "no_kd" | "task_independent"
        "epochs": 64,
        "batch_size": 16,
        "base_lr": 0.2,
        "lr_milestones": [44, 56],
        "lr_decay": 0.1,
        "weight_decay": 0.0001,
        "sgd_momentum": 0.9,
        "key_momentum": 0.99,
        "speeds": [1, 2, 4],
        "clip_len": 8,
        "snapshot_interval": 100,
        "queue_warmup_fraction": 0.25,
        "resume_from": None,
    },
    "eval": {
        "mode": "linear",  # "linear" | "finetune"
        "max_iter": 300,
        "l2_reg": 1.0,
        "checkpoint": None,
        "num_overlays": 8,
        "finetune_epochs": 5,
        "finetune_lr": 0.001,
    },
}

# Keys whose value None is legitimate and whose set type may vary.
_NULLABLE = {
    "data.data_dir",
    "data.test_manifest",
    "teacher.manifest",
    "trainer.resume_from",
    "eval.checkpoint",
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_types(doc: dict, schema: dict, path: str = "") -> None:
    for key, default in schema.items():
        here = f"{path}.{key}" if path else key
        value = doc[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a section, got {type(value).__name__}")
            _check_types(value, default, here)
            continue
        if value is None:
            if default is None or here in _NULLABLE:
                continue
            raise ConfigError(f"{here}: null is not allowed")
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{here}: expected a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{here}: expected a number, got {value!r}")
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{here}: expected a string, got {value!r}")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{here}: expected a list, got {value!r}")


def load_config(
    path: str | Path | None = None,
    overrides: dict | None = None,
    use_env_seed: bool = True,
) -> dict:
    """Resolve a full configuration document.

    Merge order: defaults <- document <- MTVSSL_SEED <- overrides.
    """
    doc = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        doc = _merge(doc, user)
    if use_env_seed and os.environ.get(SEED_ENV_VAR):
        raw = os.environ[SEED_ENV_VAR]
        try:
            doc["seed"] = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
    if overrides:
        doc = _merge(doc, overrides)
    _check_types(doc, DEFAULT_CONFIG)
    return doc


def parse_override(text: str) -> dict:
    """Turn ``a.b.c=value`` into a nested dict; values parse as JSON when
    possible and fall back to raw strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return out


def merge_overrides(texts: list[str]) -> dict:
    merged: dict = {}
    for text in texts:
        patch = parse_override(text)
        node = merged
        while True:
            key = next(iter(patch))
            if key in node and isinstance(node[key], dict) and isinstance(patch[key], dict):
                node = node[key]
                patch = patch[key]
            else:
                node[key] = patch[key]
                break
    return merged


def config_hash(doc: dict) -> str:
    return canonical_hash(doc)


def schema_json() -> str:
    """The published schema: every key with its default value."""
    return json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Dataclass builders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scene: SceneConfig
    augment: AugmentConfig
    model: ModelConfig
    loss: LossConfig
    teacher: TeacherSpec
    trainer: TrainConfig
    raw: dict  # the resolved document (hashable snapshot for checkpoints)

    @property
    def eval_options(self) -> dict:
        return self.raw["eval"]

    @property
    def data_options(self) -> dict:
        return self.raw["data"]


def _pair(value) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"expected a 2-element range, got {value!r}")
    return (value[0], value[1])


def build_experiment(doc: dict) -> ExperimentConfig:
    """Validated dataclasses from a resolved config document."""
    d = doc["data"]
    scene = SceneConfig(
        num_actions=d["scene"]["num_actions"],
        num_part_classes=d["scene"]["num_part_classes"],
        frame_count=d["scene"]["frame_count"],
        height=d["scene"]["height"],
        width=d["scene"]["width"],
        actor_scale=d["scene"]["actor_scale"],
        motion_period=d["scene"]["motion_period"],
        motion_amplitude=d["scene"]["motion_amplitude"],
        background_range=_pair(d["scene"]["background_range"]),
        brightness_range=_pair(d["scene"]["brightness_range"]),
    )
    a = d["augment"]
    augment = AugmentConfig(
        out_height=a["out_height"],
        out_width=a["out_width"],
        crop_scale=None if a["crop_scale"] is None else _pair(a["crop_scale"]),
        crop_aspect=_pair(a["crop_aspect"]),
        flip_prob=a["flip_prob"],
        brightness=_pair(a["brightness"]),
        contrast=_pair(a["contrast"]),
        saturation=_pair(a["saturation"]),
    )
    m = doc["model"]
    model = ModelConfig(
        in_channels=m["in_channels"],
        encoder_channels=tuple(m["encoder_channels"]),
        embed_dim=m["embed_dim"],
        hidden_dim=m["hidden_dim"],
        proj_dim=m["proj_dim"],
        seg_classes=m["seg_classes"],
        seg_height=m["seg_height"],
        seg_width=m["seg_width"],
        decoder_grid=m["decoder_grid"],
        decoder_channels=m["decoder_channels"],
    )
    lo = doc["loss"]
    loss = LossConfig(
        margin=lo["margin"],
        temperature=lo["temperature"],
        weight_kd=lo["weight_kd"],
        weight_motion=lo["weight_motion"],
        weight_appearance=lo["weight_appearance"],
        queue_capacity=lo["queue_capacity"],
    )
    te = doc["teacher"]
    teacher = TeacherSpec(
        kind=te["kind"],
        class_count=m["seg_classes"],
        out_height=m["seg_height"],
        out_width=m["seg_width"],
        softening=te["softening"],
        manifest=te["manifest"],
        stub_seed=te["stub_seed"],
    )
    tr = doc["trainer"]
    trainer = TrainConfig(
        variant=tr["variant"],
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        base_lr=tr["base_lr"],
        lr_milestones=tuple(tr["lr_milestones"]),
        lr_decay=tr["lr_decay"],
        weight_decay=tr["weight_decay"],
        sgd_momentum=tr["sgd_momentum"],
        key_momentum=tr["key_momentum"],
        seed=doc["seed"],
        speeds=tuple(tr["speeds"]),
        clip_len=tr["clip_len"],
        snapshot_interval=tr["snapshot_interval"],
        queue_warmup_fraction=tr["queue_warmup_fraction"],
        resume_from=tr["resume_from"],
    )
    try:
        scene.validate()
        model.validate()
        loss.validate()
        trainer.validate()
        augment.validate(scene.height, scene.width)
        if trainer.variant != "no_kd":
            teacher.validate()
    except ConfigError:
        raise
    except Exception as exc:  # surface domain validation as config errors
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        seed=doc["seed"],
        scene=scene,
        augment=augment,
        model=model,
        loss=loss,
        teacher=teacher,
        trainer=trainer,
        raw=copy.deepcopy(doc),
    )
