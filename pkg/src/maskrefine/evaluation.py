"""IoU metrics, class-mask assembly, and initial-quality gain reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import ClassIndexMask, SoftMask, ValidationError
from .vocpng import IGNORE_LABEL

DEFAULT_BANDS = ((0.0, 40.0), (40.0, 80.0), (80.0, 100.0))


def assemble_class_mask(soft_by_class: dict[int, SoftMask],
                        tau_bg: float = 0.5) -> ClassIndexMask:
    """Per-pixel argmax over class probability maps.

    A pixel is background (0) when the winning probability is below
    tau_bg; argmax ties go to the lowest class id.
    """
    if not soft_by_class:
        raise ValidationError("empty class set")
    class_ids = sorted(soft_by_class)
    if any(c <= 0 for c in class_ids):
        raise ValidationError("class ids must be positive (0 is background)")
    shapes = {soft_by_class[c].values.shape for c in class_ids}
    if len(shapes) != 1:
        raise ValidationError(f"class maps disagree in resolution: {shapes}")
    stack = np.stack([soft_by_class[c].values for c in class_ids])
    winner = np.argmax(stack, axis=0)
    best = np.max(stack, axis=0)
    ids = np.asarray(class_ids, dtype=np.int32)
    labels = np.where(best >= tau_bg, ids[winner], 0).astype(np.int32)
    return ClassIndexMask(labels)


def _valid(pred: ClassIndexMask, gt: ClassIndexMask) -> np.ndarray:
    if pred.labels.shape != gt.labels.shape:
        raise ValidationError(
            f"mask shapes disagree: {pred.labels.shape} vs {gt.labels.shape}"
        )
    return gt.labels != IGNORE_LABEL


def iou(pred: ClassIndexMask, gt: ClassIndexMask, cls: int) -> float:
    """Intersection over union for one class, ignore pixels excluded.

    Defined as 1.0 when the class is absent from both masks; such
    classes are exempt from averages.
    """
    valid = _valid(pred, gt)
    p = (pred.labels == cls) & valid
    g = (gt.labels == cls) & valid
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def class_counts(pred: ClassIndexMask, gt: ClassIndexMask,
                 num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """(intersection, union) pixel counts for classes 0..num_classes-1."""
    valid = _valid(pred, gt)
    p = pred.labels[valid].astype(np.int64)
    g = gt.labels[valid].astype(np.int64)
    if p.size and (p.max() >= num_classes or g.max() >= num_classes):
        raise ValidationError("label exceeds declared class count")
    inter = np.bincount(p[p == g], minlength=num_classes)
    pc = np.bincount(p, minlength=num_classes)
    gc = np.bincount(g, minlength=num_classes)
    return inter, pc + gc - inter


@dataclass(frozen=True)
class IoUReport:
    per_class_iou: dict[int, float]
    mean_iou: float
    intersections: dict[int, int]
    unions: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "per_class_iou": {str(c): v for c, v in sorted(self.per_class_iou.items())},
            "intersections": {str(c): v for c, v in sorted(self.intersections.items())},
            "unions": {str(c): v for c, v in sorted(self.unions.items())},
        }

    def format_table(self, class_names: dict[int, str] | None = None) -> str:
        lines = [f"{'class':>14}  {'iou':>8}"]
        for c, v in sorted(self.per_class_iou.items()):
            name = (class_names or {}).get(c, str(c))
            cell = "   (n/a)" if math.isnan(v) else f"{v:8.4f}"
            lines.append(f"{name:>14}  {cell}")
        lines.append(f"{'mean':>14}  {self.mean_iou:8.4f}")
        return "\n".join(lines)


def mean_iou(preds: list[ClassIndexMask], gts: list[ClassIndexMask],
             num_classes: int) -> IoUReport:
    """Dataset-accumulated mIoU: sum counts over samples, then divide.

    Classes whose accumulated union is empty are reported as NaN and
    excluded from the mean; the mean runs over classes present in the
    prediction or the ground truth, background included.
    """
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValidationError("empty dataset")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = class_counts(p, g, num_classes)
        inter += i
        union += u
    present = union > 0
    per_class = np.full(num_classes, np.nan)
    per_class[present] = inter[present] / union[present]
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return IoUReport(
        per_class_iou={c: float(per_class[c]) for c in range(num_classes)},
        mean_iou=mean,
        intersections={c: int(inter[c]) for c in range(num_classes)},
        unions={c: int(union[c]) for c in range(num_classes)},
    )


def sample_foreground_iou(pred: ClassIndexMask, gt: ClassIndexMask,
                          num_classes: int) -> float:
    """Mean IoU over foreground classes present in this one sample.

    Vacuously 1.0 when neither mask contains any foreground.
    """
    inter, union = class_counts(pred, gt, num_classes)
    present = union[1:] > 0
    if not present.any():
        return 1.0
    vals = inter[1:][present] / union[1:][present]
    return float(vals.mean())


@dataclass(frozen=True)
class StratifiedGainReport:
    """Per-band mean (refined - initial) sample IoU, bands in percent."""

    bands: tuple
    total_samples: int

    def to_dict(self) -> dict:
        return {
            "total_samples": self.total_samples,
            "bands": [
                {
                    "range": [lo, hi],
                    "sample_count": count,
                    "mean_gain": gain,
                }
                for (lo, hi), count, gain in self.bands
            ],
        }

    def format_table(self) -> str:
        lines = [f"{'initial IoU':>12}  {'samples':>8}  {'mean gain':>10}"]
        for (lo, hi), count, gain in self.bands:
            cell = "     (n/a)" if gain is None else f"{gain:+10.3f}"
            lines.append(f"{f'{lo:g}-{hi:g}':>12}  {count:8d}  {cell}")
        return "\n".join(lines)


def stratified_gain(initial_preds: list[ClassIndexMask],
                    refined_preds: list[ClassIndexMask],
                    gts: list[ClassIndexMask],
                    num_classes: int,
                    bands=DEFAULT_BANDS) -> StratifiedGainReport:
    """Bucket samples by initial foreground IoU, report mean gain per band.

    Bands are [lo, hi) on the 0-100 percent scale, closed at the final
    edge, and must partition [0, 100]. Gains are percentage points of
    per-sample foreground IoU.
    """
    if not (len(initial_preds) == len(refined_preds) == len(gts)):
        raise ValidationError("sample lists must align")
    if not initial_preds:
        raise ValidationError("empty dataset")
    _check_bands(bands)
    edges = [(float(lo), float(hi)) for lo, hi in bands]
    counts = [0] * len(edges)
    sums = [0.0] * len(edges)
    for init, ref, gt in zip(initial_preds, refined_preds, gts):
        initial = 100.0 * sample_foreground_iou(init, gt, num_classes)
        refined = 100.0 * sample_foreground_iou(ref, gt, num_classes)
        b = _band_of(initial, edges)
        counts[b] += 1
        sums[b] += refined - initial
    rows = tuple(
        (edges[b], counts[b], (sums[b] / counts[b]) if counts[b] else None)
        for b in range(len(edges))
    )
    return StratifiedGainReport(bands=rows, total_samples=len(initial_preds))


def _check_bands(bands) -> None:
    edges = sorted((float(lo), float(hi)) for lo, hi in bands)
    if not edges or edges[0][0] != 0.0 or edges[-1][1] != 100.0:
        raise ValidationError("bands must span [0, 100]")
    for (a_lo, a_hi), (b_lo, b_hi) in zip(edges, edges[1:]):
        if a_hi != b_lo:
            raise ValidationError("bands must be contiguous")
    if any(lo >= hi for lo, hi in edges):
        raise ValidationError("bands must be non-empty intervals")


def _band_of(value: float, edges: list[tuple[float, float]]) -> int:
    for b, (lo, hi) in enumerate(edges):
        if lo <= value < hi:
            return b
    return len(edges) - 1  # value == top edge lands in the closed last band
