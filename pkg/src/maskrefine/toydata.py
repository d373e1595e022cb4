"""Synthetic desk-scale scenes with analytically known correspondences.

Each scene uses three mutually orthogonal marker colors so that, under
the toy feature extractor, every confidence-band pixel of a generated
image matches a known region of the original:

    object interior  red   (1, 0, 0)
    filler           blue  (0, 0, 1)
    frame strip      green (0, 1, 0)   far background, low probability

The toy denoiser paints the injected region green and everything else
red. An over-segmented ring therefore matches the green frame (low
probability, mask shrinks); an under-segmented ring is painted red and
matches the red object core (high probability, mask grows).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensorfile import save_tensor
from .types import ClassIndexMask, ImageTensor, SoftMask
from .vocpng import write_indexed_png

RED = (1.0, 0.0, 0.0)
GREEN = (0.0, 1.0, 0.0)
BLUE = (0.0, 0.0, 1.0)

TOY_FG_TEXTURE = GREEN
TOY_BG_TEXTURE = RED

PROB_INTERIOR = 0.9
PROB_OVER_RING = 0.55
PROB_UNDER_RING = 0.45
PROB_BACKGROUND = 0.05

FRAME_WIDTH = 4


@dataclass(frozen=True)
class ToyScene:
    sample_id: str
    image: ImageTensor
    coarse: dict[str, SoftMask]  # class name -> soft map
    gt: ClassIndexMask
    class_ids: dict[str, int]


def _square(size: int, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def _frame(size: int, width: int = FRAME_WIDTH) -> np.ndarray:
    m = np.ones((size, size), dtype=bool)
    m[width:size - width, width:size - width] = False
    return m


def _paint(size: int, regions: list[tuple[np.ndarray, tuple[float, float, float]]],
           base=BLUE) -> ImageTensor:
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = base
    for mask, color in regions:
        img[mask] = color
    return ImageTensor(img)


def over_segmented_scene(size: int = 64, margin: int = 4,
                         class_name: str = "cat", class_id: int = 1) -> ToyScene:
    """Object square with a coarse mask dilated by ``margin`` pixels.

    The dilation ring sits in the confidence band; its generated pixels
    match the green frame, so refinement should peel the ring off.
    """
    lo, hi = size // 2 - 12, size // 2 + 12
    obj = _square(size, lo, hi, lo, hi)
    dilated = _square(size, lo - margin, hi + margin, lo - margin, hi + margin)
    image = _paint(size, [(_frame(size), GREEN), (obj, RED)])
    coarse = np.full((size, size), PROB_BACKGROUND, dtype=np.float32)
    coarse[dilated] = PROB_OVER_RING
    coarse[obj] = PROB_INTERIOR
    gt = ClassIndexMask(np.where(obj, class_id, 0).astype(np.int32))
    return ToyScene(
        sample_id=f"over_{class_name}",
        image=image,
        coarse={class_name: SoftMask(coarse)},
        gt=gt,
        class_ids={class_name: class_id},
    )


def under_segmented_scene(size: int = 64, margin: int = 4,
                          class_name: str = "cat", class_id: int = 1) -> ToyScene:
    """Object square with a coarse mask eroded by ``margin`` pixels.

    The missing ring is painted red by the toy denoiser (it falls
    outside the injected mask) and matches the red object core, so
    refinement should grow the mask back.
    """
    lo, hi = size // 2 - 12, size // 2 + 12
    obj = _square(size, lo, hi, lo, hi)
    eroded = _square(size, lo + margin, hi - margin, lo + margin, hi - margin)
    ring = obj & ~eroded
    image = _paint(size, [(_frame(size), GREEN), (eroded, RED), (ring, BLUE)])
    coarse = np.full((size, size), PROB_BACKGROUND, dtype=np.float32)
    coarse[ring] = PROB_UNDER_RING
    coarse[eroded] = PROB_INTERIOR
    gt = ClassIndexMask(np.where(obj, class_id, 0).astype(np.int32))
    return ToyScene(
        sample_id=f"under_{class_name}",
        image=image,
        coarse={class_name: SoftMask(coarse)},
        gt=gt,
        class_ids={class_name: class_id},
    )


def two_class_scene(size: int = 64, margin: int = 3) -> ToyScene:
    """One over-segmented and one under-segmented object in one image."""
    a = _square(size, 10, 28, 8, 26)
    a_dil = _square(size, 10 - margin, 28 + margin, 8 - margin, 26 + margin)
    b = _square(size, 38, 56, 38, 56)
    b_ero = _square(size, 38 + margin, 56 - margin, 38 + margin, 56 - margin)
    b_ring = b & ~b_ero
    image = _paint(size, [(_frame(size), GREEN), (a, RED), (b_ero, RED), (b_ring, BLUE)])

    coarse_a = np.full((size, size), PROB_BACKGROUND, dtype=np.float32)
    coarse_a[a_dil] = PROB_OVER_RING
    coarse_a[a] = PROB_INTERIOR
    coarse_b = np.full((size, size), PROB_BACKGROUND, dtype=np.float32)
    coarse_b[b_ring] = PROB_UNDER_RING
    coarse_b[b_ero] = PROB_INTERIOR

    labels = np.zeros((size, size), dtype=np.int32)
    labels[a] = 1
    labels[b] = 2
    return ToyScene(
        sample_id="pair_cat_dog",
        image=image,
        coarse={"cat": SoftMask(coarse_a), "dog": SoftMask(coarse_b)},
        gt=ClassIndexMask(labels),
        class_ids={"cat": 1, "dog": 2},
    )


def default_scenes(size: int = 64) -> list[ToyScene]:
    return [
        over_segmented_scene(size),
        under_segmented_scene(size, class_name="dog", class_id=2),
        two_class_scene(size),
    ]


def image_to_png(img: ImageTensor, path: str | Path) -> None:
    arr = np.clip(img.array, 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(str(path))


def png_to_image(path: str | Path) -> ImageTensor:
    arr = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float32) / 255.0
    return ImageTensor(arr)


def make_toy_dataset(root: str | Path, scenes: list[ToyScene] | None = None,
                     size: int = 64) -> Path:
    """Write a ready-to-run dataset layout under ``root``."""
    root = Path(root)
    scenes = scenes if scenes is not None else default_scenes(size)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "coarse_masks").mkdir(exist_ok=True)
    (root / "gt_masks").mkdir(exist_ok=True)
    prompts: dict[str, list[str]] = {}
    class_ids: dict[str, int] = {}
    for scene in scenes:
        image_to_png(scene.image, root / "images" / f"{scene.sample_id}.png")
        write_indexed_png(root / "gt_masks" / f"{scene.sample_id}.png", scene.gt)
        for name, soft in scene.coarse.items():
            save_tensor(root / "coarse_masks" / f"{scene.sample_id}__{name}.g4tn",
                        soft.values)
        prompts[scene.sample_id] = sorted(scene.coarse)
        class_ids.update(scene.class_ids)
    (root / "prompts.json").write_text(json.dumps(prompts, indent=2, sort_keys=True))
    (root / "classes.json").write_text(json.dumps(class_ids, indent=2, sort_keys=True))
    return root
