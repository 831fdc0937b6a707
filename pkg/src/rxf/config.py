"""JSON config parsing for the command-line entry points.

Configs are strict: unknown keys are rejected so typos fail loudly instead
of silently falling back to defaults. The training objective's lambda weight
is spelled "lambda" in JSON and `lam` in code.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Type, TypeVar

from .encoders import ImageEncoderConfig, TextEncoderConfig
from .losses import DrcConfig
from .synth import BenchConfig, SynthConfig
from .trainer import TrainConfig

T = TypeVar("T")


def load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config root must be a JSON object: {path}")
    return doc


def _strict(cls: Type[T], data: dict, section: str) -> T:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown keys in {section} config: {unknown}")
    return cls(**data)


def drc_from_dict(data: dict) -> DrcConfig:
    data = dict(data)
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    return _strict(DrcConfig, data, "drc")


def train_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if "drc" in data:
        data["drc"] = drc_from_dict(data["drc"])
    if "grad_clip" in data and data["grad_clip"] is not None:
        data["grad_clip"] = float(data["grad_clip"])
    return _strict(TrainConfig, data, "train")


def image_encoder_from_dict(data: dict) -> ImageEncoderConfig:
    return _strict(ImageEncoderConfig, dict(data), "image_encoder")


def text_encoder_from_dict(data: dict) -> TextEncoderConfig:
    return _strict(TextEncoderConfig, dict(data), "text_encoder")


def synth_from_dict(data: dict) -> SynthConfig:
    return _strict(SynthConfig, dict(data), "synth")


def bench_from_dict(data: dict) -> BenchConfig:
    data = dict(data)
    if "synth" in data:
        data["synth"] = synth_from_dict(data["synth"])
    if "image_encoder" in data:
        data["image_encoder"] = image_encoder_from_dict(data["image_encoder"])
    if "text_encoder" in data:
        data["text_encoder"] = text_encoder_from_dict(data["text_encoder"])
    if "train" in data:
        data["train"] = train_from_dict(data["train"])
    for key in ("loss_kinds", "seeds", "k_values"):
        if key in data:
            data[key] = tuple(data[key])
    return _strict(BenchConfig, data, "bench")


def run_config_from_dict(doc: dict) -> dict[str, Any]:
    """Parse a training run config: data paths plus the three config sections."""
    known = {"data", "image_encoder", "text_encoder", "train", "out_dir"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown keys in run config: {unknown}")
    data = doc.get("data", {})
    for key in ("train_manifest", "val_manifest"):
        if key not in data:
            raise ValueError(f"run config data section is missing '{key}'")
    return {
        "data": data,
        "image_encoder": image_encoder_from_dict(doc.get("image_encoder", {})),
        "text_encoder": text_encoder_from_dict(doc.get("text_encoder", {})),
        "train": train_from_dict(doc.get("train", {})),
        "out_dir": doc.get("out_dir"),
    }
