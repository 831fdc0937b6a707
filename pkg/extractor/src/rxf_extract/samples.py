"""Raw input samples: one image + instruction pair per row of the manifest.

The input manifest is a JSON object:

    {
      "format": "rxf-raw-manifest/1",
      "dataset_id": "...",
      "split": "test",
      "samples": [
        {"sample_id": "s1", "env_id": "env0", "image": "imgs/001.jpg",
         "instruction": "carry the mug to the sink", "mode": "target",
         "gt_image_id": "s1"}
      ]
    }

Each sample contributes one image (id = sample_id) to its environment's
pool and one query. gt_image_id names the sample whose image answers the
query; it defaults to the sample itself and must live in the same
environment. Image paths are resolved relative to the manifest file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import MODES

RAW_FORMAT = "rxf-raw-manifest/1"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RawSample:
    sample_id: str
    env_id: str
    image_path: Path
    instruction: str
    mode: str
    gt_image_id: str

    def query_id(self) -> str:
        return f"{self.sample_id}.q"


@dataclass(frozen=True)
class RawManifest:
    dataset_id: str
    split: str
    samples: tuple[RawSample, ...]


def load_image(path: Path) -> np.ndarray:
    """Decode to an RGB uint8 array of shape (H, W, 3)."""
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except UnidentifiedImageError as err:
        raise ValueError(f"image {path} is not decodable: {err}") from None


def content_hash(sample: RawSample, config_digest: str) -> str:
    """Cache key: the image bytes, the query text/role, and the extraction
    config all participate, so any change re-extracts."""
    h = hashlib.sha256()
    h.update(sample.image_path.read_bytes())
    for part in (sample.sample_id, sample.env_id, sample.instruction, sample.mode, sample.gt_image_id, config_digest):
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


def load_raw_manifest(path: str | Path) -> RawManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"raw manifest not found: {path}")
    raw = json.loads(path.read_text())
    if raw.get("format") != RAW_FORMAT:
        raise ValueError(f"unsupported raw manifest format {raw.get('format')!r}; expected {RAW_FORMAT!r}")
    if raw.get("split") not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {raw.get('split')!r}")
    if not raw.get("dataset_id"):
        raise ValueError("raw manifest needs a dataset_id")
    entries = raw.get("samples") or []
    if not entries:
        raise ValueError("raw manifest lists no samples")

    samples = []
    for entry in entries:
        sample_id = entry.get("sample_id")
        if not sample_id:
            raise ValueError(f"sample entry without sample_id: {entry}")
        if not entry.get("instruction", "").strip():
            raise ValueError(f"sample {sample_id}: instruction is empty")
        if entry.get("mode") not in MODES:
            raise ValueError(f"sample {sample_id}: mode must be one of {MODES}, got {entry.get('mode')!r}")
        samples.append(
            RawSample(
                sample_id=sample_id,
                env_id=entry.get("env_id", ""),
                image_path=(path.parent / entry["image"]).resolve(),
                instruction=entry["instruction"],
                mode=entry["mode"],
                gt_image_id=entry.get("gt_image_id", sample_id),
            )
        )

    seen: set[str] = set()
    for s in samples:
        if s.sample_id in seen:
            raise ValueError(f"duplicate sample_id '{s.sample_id}'")
        seen.add(s.sample_id)
        if not s.env_id:
            raise ValueError(f"sample {s.sample_id}: env_id is empty")
    by_env: dict[str, set[str]] = {}
    for s in samples:
        by_env.setdefault(s.env_id, set()).add(s.sample_id)
    for s in samples:
        if s.gt_image_id not in by_env[s.env_id]:
            raise ValueError(
                f"sample {s.sample_id}: gt_image_id '{s.gt_image_id}' is not a sample of environment '{s.env_id}'"
            )
    for s in samples:
        load_image(s.image_path)  # decodability is a manifest invariant, checked up front

    return RawManifest(dataset_id=raw["dataset_id"], split=raw["split"], samples=tuple(samples))
