"""Dense feature correspondence and probability mixing.

For every pixel of the generated image the closest original-image
pixel is found under cosine distance; foreground probabilities inside
the confidence band are then pulled toward their matched pixel's
probability. Over-segmented pixels match lower-probability exterior
content and shrink, under-segmented pixels match higher-probability
interior content and grow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import (
    ImageTensor,
    SoftMask,
    ValidationError,
    nearest_indices,
    resample_mask,
)

_BLOCK_ROWS = 512


@dataclass(frozen=True)
class FeatureMap:
    """h x w grid of d-dimensional per-pixel features."""

    data: np.ndarray  # (h, w, d) float32
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"features must be (h, w, d), got {arr.shape}")
        if any(s <= 0 for s in arr.shape):
            raise ValidationError(f"feature dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("features contain a non-finite value")
        if self.normalized:
            norms = np.linalg.norm(arr.reshape(-1, arr.shape[2]), axis=1)
            nonzero = norms > 0
            if nonzero.any() and np.abs(norms[nonzero] - 1.0).max() > 1e-5:
                raise ValidationError("normalized flag set but norms deviate from 1")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """(h*w, d) row-major view."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass(frozen=True)
class CorrespondenceMap:
    """For each generated pixel (row-major), the matched original index."""

    indices: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        n = self.height * self.width
        if idx.shape != (n,):
            raise ValidationError(f"expected {n} indices, got shape {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError("correspondence index out of range")
        idx = np.ascontiguousarray(idx)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class MixConfig:
    """Mixing coefficient and confidence-filter band."""

    beta: float = 0.8
    cf_low: float = 0.2
    cf_high: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.cf_low <= self.cf_high <= 1.0:
            raise ValidationError(
                f"need 0 <= cf_low <= cf_high <= 1, got [{self.cf_low}, {self.cf_high}]"
            )


def normalize_features(fm: FeatureMap, eps: float = 1e-8) -> FeatureMap:
    """Scale every pixel vector to unit L2 norm.

    Vectors with norm below eps are left (near) zero rather than blown
    up; a zero vector then has distance 1 to everything and never wins
    a match preferentially.
    """
    flat = fm.flat().astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    out = flat / np.maximum(norms, eps)
    return FeatureMap(out.reshape(fm.data.shape).astype(np.float32), normalized=True)


def _check_pair(f_orig: FeatureMap, f_gen: FeatureMap) -> None:
    if f_orig.data.shape != f_gen.data.shape:
        raise ValidationError(
            f"feature maps disagree: {f_orig.data.shape} vs {f_gen.data.shape}"
        )


def _require_normalized(*maps: FeatureMap) -> None:
    for fm in maps:
        if not fm.normalized:
            raise ValidationError("correspondence search needs normalized features")


def _duplicate_canonical_map(flat: np.ndarray) -> np.ndarray | None:
    """Map each pixel index to the lowest index holding identical features.

    BLAS kernels may compute bitwise-different dot products for
    value-identical rows depending on their position in the matrix, so
    an argmax alone cannot honor the lowest-index tie-break between
    duplicated pixels. Canonicalizing the winner through this map makes
    the tie-break exact in every search path.
    """
    _, first, inverse = np.unique(flat, axis=0, return_index=True,
                                  return_inverse=True)
    if first.size == flat.shape[0]:
        return None
    return first[inverse.reshape(-1)]


def find_correspondence_bruteforce(f_orig: FeatureMap,
                                   f_gen: FeatureMap) -> CorrespondenceMap:
    """Reference search: per-pixel exhaustive scan over all candidates.

    Cosine distance 1 - dot is monotone in the dot product, so the
    argmin of distance is the argmax of similarity; ties go to the
    lowest original index.
    """
    _check_pair(f_orig, f_gen)
    _require_normalized(f_orig, f_gen)
    orig = f_orig.flat().astype(np.float64)
    gen = f_gen.flat().astype(np.float64)
    canonical = _duplicate_canonical_map(f_orig.flat())
    idx = np.empty(gen.shape[0], dtype=np.int64)
    for j in range(gen.shape[0]):
        sims = orig @ gen[j]
        idx[j] = int(np.argmax(sims))
    if canonical is not None:
        idx = canonical[idx]
    return CorrespondenceMap(idx, f_gen.height, f_gen.width)


def find_correspondence(f_orig: FeatureMap, f_gen: FeatureMap,
                        block_rows: int = _BLOCK_ROWS) -> CorrespondenceMap:
    """Blocked similarity-matrix search; index-identical to brute force.

    Tiles the generated pixels so the similarity matrix never exceeds
    block_rows x n, computing each tile as one dense matrix product.
    """
    _check_pair(f_orig, f_gen)
    _require_normalized(f_orig, f_gen)
    orig_t = f_orig.flat().astype(np.float64).T  # (d, n)
    gen = f_gen.flat().astype(np.float64)
    canonical = _duplicate_canonical_map(f_orig.flat())
    n = gen.shape[0]
    idx = np.empty(n, dtype=np.int64)
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        sims = gen[start:stop] @ orig_t
        idx[start:stop] = np.argmax(sims, axis=1)
    if canonical is not None:
        idx = canonical[idx]
    return CorrespondenceMap(idx, f_gen.height, f_gen.width)


def mix_probabilities(s: SoftMask, delta: CorrespondenceMap,
                      cfg: MixConfig) -> SoftMask:
    """Blend each filtered pixel's probability with its match:

        s_new[j] = beta * s[j] + (1 - beta) * s[delta_j]

    Only pixels whose current probability lies inside
    [cf_low, cf_high] are updated; everything else is copied.
    Implemented as s + (1 - beta) * (s[delta] - s), which is the same
    algebra but exact when the matched probability equals the pixel's
    own.
    """
    if s.height != delta.height or s.width != delta.width:
        raise ValidationError(
            f"mask {s.height}x{s.width} does not match correspondence "
            f"{delta.height}x{delta.width}"
        )
    flat32 = s.values.reshape(-1)
    flat = flat32.astype(np.float64)
    mixed = flat + (1.0 - cfg.beta) * (flat[delta.indices] - flat)
    # band edges compared at the mask's own precision so that a stored
    # 0.6 is inside [0.2, 0.6]
    band = (flat32 >= np.float32(cfg.cf_low)) & (flat32 <= np.float32(cfg.cf_high))
    out = np.where(band, mixed, flat)
    out = np.clip(out, 0.0, 1.0)
    return SoftMask(out.reshape(s.height, s.width).astype(np.float32))


class FeatureExtractor:
    """Contract: deterministic per-pixel embedding at a fixed grid."""

    def embed(self, img: ImageTensor) -> FeatureMap:
        raise NotImplementedError


class ToyFeatureExtractor(FeatureExtractor):
    """Channels plus weighted normalized coordinates, unit-normalized.

    Feature of pixel (y, x) is (img[y, x, :], w_pos*(x+0.5)/W,
    w_pos*(y+0.5)/H) scaled to unit norm. Color dominates matching
    while the positional term breaks ties toward the same location,
    which makes correspondences analytically predictable.
    """

    def __init__(self, pos_weight: float = 0.25,
                 grid: tuple[int, int] | None = None):
        self.pos_weight = pos_weight
        self.grid = grid

    def embed(self, img: ImageTensor) -> FeatureMap:
        arr = img.array.astype(np.float64)
        h, w = arr.shape[:2]
        if self.grid is not None:
            gh, gw = self.grid
            arr = arr[np.ix_(nearest_indices(h, gh), nearest_indices(w, gw))]
            h, w = gh, gw
        xs = self.pos_weight * (np.arange(w, dtype=np.float64) + 0.5) / w
        ys = self.pos_weight * (np.arange(h, dtype=np.float64) + 0.5) / h
        px = np.broadcast_to(xs[None, :, None], (h, w, 1))
        py = np.broadcast_to(ys[:, None, None], (h, w, 1))
        feats = np.concatenate([arr, px, py], axis=2)
        return normalize_features(FeatureMap(feats.astype(np.float32)))


def refine_mask_from_features(s: SoftMask, f_orig: FeatureMap,
                              f_gen: FeatureMap, cfg: MixConfig) -> SoftMask:
    """Correspondence + mixing on precomputed feature maps.

    The soft mask is brought to the feature grid, mixed there, and
    resampled back to its own resolution.
    """
    _check_pair(f_orig, f_gen)
    if not f_orig.normalized:
        f_orig = normalize_features(f_orig)
    if not f_gen.normalized:
        f_gen = normalize_features(f_gen)
    delta = find_correspondence(f_orig, f_gen)
    s_feat = resample_mask(s, f_gen.height, f_gen.width)
    s_star = mix_probabilities(s_feat, delta, cfg)
    return resample_mask(s_star, s.height, s.width)


def refine_mask(x: ImageTensor, x_gen: ImageTensor, s: SoftMask,
                extractor: FeatureExtractor, cfg: MixConfig) -> SoftMask:
    """Full per-class refinement: embed, match, mix, resample back."""
    if x.array.shape[:2] != x_gen.array.shape[:2]:
        raise ValidationError(
            f"image sizes disagree: {x.array.shape[:2]} vs {x_gen.array.shape[:2]}"
        )
    f_orig = extractor.embed(x)
    f_gen = extractor.embed(x_gen)
    return refine_mask_from_features(s, f_orig, f_gen, cfg)


def refine_all_classes(x: ImageTensor, x_gen_by_class: dict,
                       s_by_class: dict, extractor: FeatureExtractor,
                       cfg: MixConfig) -> dict:
    """Refine each present class independently.

    Every class carries its own generated image and soft map; other
    classes' maps are never read, so results equal isolated per-class
    calls. Classes absent from the coarse prediction stay absent.
    """
    out = {}
    for cls, s in s_by_class.items():
        if cls not in x_gen_by_class:
            raise ValidationError(f"missing generated image for class {cls!r}")
        out[cls] = refine_mask(x, x_gen_by_class[cls], s, extractor, cfg)
    return out


def _distance_block(a_block: np.ndarray, b_flat: np.ndarray, metric) -> np.ndarray:
    if callable(metric):
        return metric(a_block, b_flat)
    if metric == "cosine":
        return np.maximum(0.0, 1.0 - a_block @ b_flat.T)
    if metric == "euclidean":
        aa = np.sum(a_block * a_block, axis=1, keepdims=True)
        bb = np.sum(b_flat * b_flat, axis=1)
        sq = np.maximum(0.0, aa + bb - 2.0 * (a_block @ b_flat.T))
        return np.sqrt(sq)
    raise ValidationError(f"unknown pixel metric {metric!r}")


def hausdorff_distance(a: FeatureMap, b: FeatureMap,
                       pixel_metric="cosine") -> float:
    """Directed Hausdorff distance: max over a's pixels of the distance
    to their closest pixel in b."""
    if a.dim != b.dim:
        raise ValidationError(f"feature dims disagree: {a.dim} vs {b.dim}")
    a_flat = a.flat().astype(np.float64)
    b_flat = b.flat().astype(np.float64)
    worst = 0.0
    for start in range(0, a_flat.shape[0], _BLOCK_ROWS):
        block = a_flat[start:start + _BLOCK_ROWS]
        best = _distance_block(block, b_flat, pixel_metric).min(axis=1)
        worst = max(worst, float(best.max()))
    return worst


def directed_sum_distance(a: FeatureMap, b: FeatureMap,
                          pixel_metric="cosine") -> float:
    """Summed variant: total best-match distance over a's pixels.

    Replacing the sup with a sum keeps one term per pixel, which is
    exactly the quantity the per-pixel correspondence minimizes.
    """
    if a.dim != b.dim:
        raise ValidationError(f"feature dims disagree: {a.dim} vs {b.dim}")
    a_flat = a.flat().astype(np.float64)
    b_flat = b.flat().astype(np.float64)
    total = 0.0
    for start in range(0, a_flat.shape[0], _BLOCK_ROWS):
        block = a_flat[start:start + _BLOCK_ROWS]
        total += float(_distance_block(block, b_flat, pixel_metric).min(axis=1).sum())
    return total
