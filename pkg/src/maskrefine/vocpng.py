"""Indexed-PNG mask I/O with the 256-entry VOC color palette.

Class index equals palette index; 255 is the conventional ignore label.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .types import ClassIndexMask

VOC_CLASSES = (
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus",
    "car", "cat", "chair", "cow", "diningtable", "dog", "horse", "motorbike",
    "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

IGNORE_LABEL = 255


def voc_palette() -> list[int]:
    """Flat RGB palette (256 * 3 ints), bit-reversal VOC colormap."""
    palette = []
    for idx in range(256):
        r = g = b = 0
        c = idx
        for shift in range(8):
            r |= ((c >> 0) & 1) << (7 - shift)
            g |= ((c >> 1) & 1) << (7 - shift)
            b |= ((c >> 2) & 1) << (7 - shift)
            c >>= 3
        palette.extend((r, g, b))
    return palette


_PALETTE = voc_palette()


def write_indexed_png(path: str | Path, mask: ClassIndexMask | np.ndarray) -> None:
    labels = mask.labels if isinstance(mask, ClassIndexMask) else np.asarray(mask)
    if labels.max(initial=0) > 255:
        raise ValueError("indexed PNG supports at most 256 classes")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(_PALETTE)
    img.save(str(path), format="PNG")


def read_indexed_png(path: str | Path) -> np.ndarray:
    """Read a palette (or grayscale) PNG as an int label map.

    Returns the raw labels including any 255 ignore pixels; evaluation
    decides how to treat them.
    """
    img = Image.open(str(path))
    if img.mode not in ("P", "L"):
        raise ValueError(f"expected indexed or grayscale PNG, got mode {img.mode}")
    return np.asarray(img, dtype=np.int32)
