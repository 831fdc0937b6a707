"""Numeric mark placement on segmentation masks.

Masks are processed from the smallest to the largest area; each mark must
sit inside its own mask but outside every previously processed mask, so a
nested inner region never "steals" the position of its surrounding one.
The numeric labels are then assigned to the placed positions in descending
order: the last-processed (largest) mask carries label 1.

A mask whose allowed region is empty gets no mark; it is skipped and
logged, never squeezed somewhere wrong.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mark:
    label: int
    position: tuple[int, int]  # (row, col)
    mask_index: int  # index into the input mask list


@dataclass(frozen=True)
class MarkedImage:
    image: np.ndarray  # RGB uint8 with marks drawn in
    marks: tuple[Mark, ...]


def _best_position(allowed: np.ndarray) -> tuple[int, int]:
    # deepest interior point of the allowed region: stays legible when the
    # region is an annulus left over after exclusion; the pad makes the
    # image border count as outside
    dist = ndimage.distance_transform_edt(np.pad(allowed, 1))[1:-1, 1:-1]
    r, c = np.unravel_index(int(np.argmax(dist)), allowed.shape)
    return int(r), int(c)


def _draw(image: np.ndarray, marks: list[Mark]) -> np.ndarray:
    out = Image.fromarray(image.copy())
    draw = ImageDraw.Draw(out)
    for mark in marks:
        r, c = mark.position
        text = str(mark.label)
        w = 4 + 6 * len(text)
        draw.rectangle([c - w // 2, r - 7, c + w // 2, r + 7], fill=(255, 255, 255), outline=(0, 0, 0))
        draw.text((c - w // 2 + 3, r - 6), text, fill=(0, 0, 0))
    return np.asarray(out)


def mark_segments(image: np.ndarray, masks: list[np.ndarray]) -> MarkedImage:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be RGB (H, W, 3), got shape {image.shape}")
    if not masks:
        raise ValueError("need at least one segmentation mask")
    for i, mask in enumerate(masks):
        if mask.shape != image.shape[:2]:
            raise ValueError(f"mask {i} shape {mask.shape} does not match image {image.shape[:2]}")
        if mask.dtype != bool:
            raise ValueError(f"mask {i} must be boolean, got {mask.dtype}")

    order = sorted(range(len(masks)), key=lambda i: (int(masks[i].sum()), i))
    covered = np.zeros(image.shape[:2], dtype=bool)
    placed: list[tuple[int, tuple[int, int]]] = []  # (mask index, position) in processing order
    for idx in order:
        allowed = masks[idx] & ~covered
        if not allowed.any():
            log.warning("mask %d: no region left after exclusion, mark skipped", idx)
        else:
            placed.append((idx, _best_position(allowed)))
        covered |= masks[idx]

    marks = [
        Mark(label=len(placed) - rank, position=pos, mask_index=idx)
        for rank, (idx, pos) in enumerate(placed)
    ]
    return MarkedImage(image=_draw(image, marks), marks=tuple(marks))
