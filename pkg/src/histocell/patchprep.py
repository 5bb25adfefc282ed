"""Patch geometry around spot centers and white-background filtering.

A patch is a square crop centered on a spot; background-dominated patches
(mostly white pixels under H&E staining) are dropped before training.  The
filtering logic works on in-memory rasters; PNG decoding sits behind one
small loader so everything else stays file-free.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import SchemaError, SpotTable, fmt_float

__all__ = [
    "DEFAULT_PATCH_SIZE",
    "DEFAULT_WHITE_THRESHOLD",
    "DEFAULT_MAX_BACKGROUND",
    "PatchBBox",
    "PatchRaster",
    "patch_bbox",
    "background_fraction",
    "filter_spots",
    "load_patch",
    "scan_patch_dir",
    "write_fractions_csv",
    "load_fractions_csv",
]

log = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 224
DEFAULT_WHITE_THRESHOLD = 220
DEFAULT_MAX_BACKGROUND = 0.8


@dataclass(frozen=True)
class PatchBBox:
    x0: int
    y0: int
    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError("bbox origin must be nonnegative")


@dataclass
class PatchRaster:
    """Square RGB pixel block, shape (size, size, 3), uint8."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be (h, w, 3)")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError("patch must be square")

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


def patch_bbox(center_x: float, center_y: float, size: int = DEFAULT_PATCH_SIZE,
               image_w: int = 0, image_h: int = 0) -> PatchBBox:
    """Square bbox of side `size` centered on the spot, shifted to stay
    inside the image (no padding)."""
    if size > image_w or size > image_h:
        raise ValueError(f"image {image_w}x{image_h} smaller than patch size {size}")
    if not (0 <= center_x <= image_w and 0 <= center_y <= image_h):
        raise ValueError(f"center ({center_x}, {center_y}) outside image")
    x0 = int(round(center_x)) - size // 2
    y0 = int(round(center_y)) - size // 2
    x0 = min(max(x0, 0), image_w - size)
    y0 = min(max(y0, 0), image_h - size)
    return PatchBBox(x0=x0, y0=y0, size=size)


def background_fraction(patch: PatchRaster,
                        white_threshold: int = DEFAULT_WHITE_THRESHOLD) -> float:
    """Fraction of pixels whose darkest channel still exceeds the
    threshold (i.e. near-white in all of r, g, b)."""
    darkest = patch.pixels.min(axis=2)
    return float((darkest > white_threshold).mean())


def filter_spots(spots: SpotTable, fractions: dict, max_background: float = DEFAULT_MAX_BACKGROUND) -> SpotTable:
    """Spots whose patch background fraction is <= `max_background`, in
    the original order.  Every spot needs a fraction; an empty result is
    legal but logged."""
    missing = [sid for sid in spots.spot_ids if sid not in fractions]
    if missing:
        raise SchemaError(f"no background fraction for spot {missing[0]!r}"
                          + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    keep = [sid for sid in spots.spot_ids if fractions[sid] <= max_background]
    if not keep:
        log.warning("background filter (max %.3f) removed all %d spots",
                    max_background, spots.n)
        return SpotTable(spot_ids=(), sample_ids=(), patient_ids=(),
                         coords=np.zeros((0, 2)), embeddings=np.zeros((0, spots.dim)))
    if len(keep) < spots.n:
        log.info("background filter kept %d of %d spots", len(keep), spots.n)
    return spots.subset(keep)


def load_patch(path) -> PatchRaster:
    with Image.open(path) as img:
        return PatchRaster(pixels=np.asarray(img.convert("RGB")))


def scan_patch_dir(directory, white_threshold: int = DEFAULT_WHITE_THRESHOLD) -> dict:
    """Background fraction for every `<spot_id>.png` in a directory."""
    directory = Path(directory)
    fractions = {}
    for path in sorted(directory.glob("*.png")):
        fractions[path.stem] = background_fraction(load_patch(path), white_threshold)
    if not fractions:
        raise SchemaError(f"{directory}: no .png patches found")
    return fractions


def write_fractions_csv(fractions: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["spot_id", "background_fraction"])
        for sid in sorted(fractions):
            writer.writerow([sid, fmt_float(fractions[sid])])


def load_fractions_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["spot_id", "background_fraction"]:
            raise SchemaError(f"{path}:1: header must be spot_id,background_fraction")
        fractions = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0] or row[0] in fractions:
                raise SchemaError(f"{path}:{lineno}: malformed or duplicate row")
            try:
                value = float(row[1])
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: invalid fraction {row[1]!r}") from None
            if not (0.0 <= value <= 1.0):
                raise SchemaError(f"{path}:{lineno}: fraction {value} outside [0, 1]")
            fractions[row[0]] = value
    if not fractions:
        raise SchemaError(f"{path}: no rows")
    return fractions
