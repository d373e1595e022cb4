"""Core array types shared across the refinement pipeline.

All types are thin immutable wrappers around numpy arrays. Construction
validates the declared invariants and freezes the underlying buffer, so
instances are safe to share read-only across worker threads.

Conventions: 2-D grids are row-major, so a flattened mask index is
``i = y * width + x``. Images are ``(H, W, C)``, masks ``(H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a type invariant."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """Dense H x W x C float image.

    Pixel-space images hold values in [0, 1]; intermediate diffusion
    states (noised or predicted tensors) may exceed that range, so the
    range check lives in :func:`validate_image`, not the constructor.
    Stored as float32 by default; float64 is permitted for diffusion
    intermediates where float32 rounding would not survive the
    signal-rescaling at large timesteps.
    """

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.ndim != 3:
            raise ValidationError(f"image must be (H, W, C), got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if any(s <= 0 for s in arr.shape):
            raise ValidationError(f"image dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains a non-finite value")
        object.__setattr__(self, "array", _freeze(arr))

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return self.array.shape[2]

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the pixel data."""
        return self.array.reshape(-1)

    @classmethod
    def from_flat(cls, data, height: int, width: int, channels: int) -> "ImageTensor":
        data = np.asarray(data, dtype=np.float32)
        if data.size != height * width * channels:
            raise ValidationError(
                f"length mismatch: {data.size} values for declared "
                f"{height}x{width}x{channels}"
            )
        return cls(data.reshape(height, width, channels))


def validate_image(img: ImageTensor) -> ImageTensor:
    """Check pixel-space invariants: finite values within [0, 1].

    Returns the input unchanged when valid. Shape and finiteness are
    already constructor-enforced; this adds the pixel range check.
    """
    arr = img.array
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains a non-finite value")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"pixel out of range [0, 1]: min={lo}, max={hi}")
    return img


@dataclass(frozen=True)
class SoftMask:
    """H x W foreground-probability map, every value in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be (H, W), got shape {arr.shape}")
        if any(s <= 0 for s in arr.shape):
            raise ValidationError(f"mask dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("mask contains a non-finite value")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("mask value out of range [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binarize(self, threshold: float) -> "BinaryMask":
        """Threshold to a hard mask: 1 where value >= threshold."""
        return BinaryMask((self.values >= threshold).astype(np.uint8))


@dataclass(frozen=True)
class BinaryMask:
    """H x W hard mask with values exactly 0 or 1."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be (H, W), got shape {arr.shape}")
        if any(s <= 0 for s in arr.shape):
            raise ValidationError(f"mask dims must be positive, got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("binary mask may only contain 0 and 1")
        object.__setattr__(self, "bits", _freeze(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def flatten(self) -> np.ndarray:
        """Row-major 1-D view (index i = y * W + x)."""
        return self.bits.reshape(-1)

    def as_soft(self) -> SoftMask:
        return SoftMask(self.bits.astype(np.float32))


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients for the forward process.

    ``alpha_bar[t]`` is the cumulative product of per-step retention
    up to step t, with ``alpha_bar[0] == 1``. The source formulation is
    ambiguous about whether its retention symbol is per-step or
    cumulative; this codebase consistently uses the cumulative product
    (the form under which one noising step and its algebraic inverse
    are exact).
    """

    alpha_bar: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValidationError("alpha_bar must be a 1-D array of length T+1")
        if arr[0] != 1.0:
            raise ValidationError("alpha_bar[0] must be exactly 1")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("alpha_bar contains a non-finite value")
        if np.any(arr <= 0.0) or np.any(arr > 1.0):
            raise ValidationError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(arr) >= 0.0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", _freeze(arr))

    @property
    def num_steps(self) -> int:
        return self.alpha_bar.size - 1

    def at(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ValidationError(f"timestep {t} outside [0, {self.num_steps}]")
        return float(self.alpha_bar[t])

    @classmethod
    def linear_beta(cls, num_steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> "NoiseSchedule":
        """Standard linear-beta schedule (default T=1000, 1e-4..0.02)."""
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(abar)


@dataclass(frozen=True)
class TokenIndexSet:
    """Sorted indices into the text-token axis of a prompt embedding."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if any(i < 0 for i in idx):
            raise ValidationError("token indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def check_key_length(self, k: int) -> None:
        if self.indices and self.indices[-1] >= k:
            raise ValidationError(
                f"token index {self.indices[-1]} >= key length {k}"
            )


def tokenize_prompt(prompt: str) -> list[str]:
    """Lowercase whitespace word tokenization used on the engine side.

    The export side uses the text encoder's own tokenizer; this simple
    scheme only has to keep class-name token matching exact.
    """
    return prompt.lower().split()


def class_token_indices(prompt: str, class_name: str) -> TokenIndexSet:
    """Indices of the class name's tokens inside the tokenized prompt.

    Multi-word class names contribute all their token positions; every
    occurrence of the full token subsequence counts.
    """
    tokens = tokenize_prompt(prompt)
    needle = tokenize_prompt(class_name)
    if not needle:
        raise ValidationError("empty class name")
    hits: list[int] = []
    for start in range(len(tokens) - len(needle) + 1):
        if tokens[start:start + len(needle)] == needle:
            hits.extend(range(start, start + len(needle)))
    if not hits:
        raise ValidationError(f"class name {class_name!r} not found in prompt {prompt!r}")
    return TokenIndexSet(tuple(hits))


@dataclass(frozen=True)
class ClassIndexMask:
    """H x W integer label map; 0 is background."""

    labels: np.ndarray
    num_classes: int | None = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValidationError(f"labels must be (H, W), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError("labels must be integers")
        if arr.min() < 0:
            raise ValidationError("labels must be non-negative")
        if self.num_classes is not None and arr.max() >= self.num_classes:
            raise ValidationError(
                f"label {int(arr.max())} >= declared class count {self.num_classes}"
            )
        object.__setattr__(self, "labels", _freeze(arr.astype(np.int32)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def resample_mask(mask: SoftMask, target_h: int, target_w: int,
                  mode: str = "nearest") -> SoftMask:
    """Nearest-neighbor resample of a soft mask to a new grid.

    Source index per axis is floor((i + 0.5) * src / dst). Nearest is
    the only supported mode: it preserves binarity, which the hard
    {0, 1} attention-injection masks rely on.
    """
    if mode != "nearest":
        raise ValidationError(f"unsupported resample mode {mode!r}")
    if target_h <= 0 or target_w <= 0:
        raise ValidationError("target dims must be positive")
    src = mask.values
    ys = nearest_indices(src.shape[0], target_h)
    xs = nearest_indices(src.shape[1], target_w)
    return SoftMask(src[np.ix_(ys, xs)])


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source indices for nearest resampling: floor((i+0.5)*src/dst)."""
    idx = np.floor((np.arange(dst, dtype=np.float64) + 0.5) * src / dst).astype(np.int64)
    return np.minimum(idx, src - 1)


def seeded_normal(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Reproducible standard normals from a counter-based generator.

    Each output element is derived from a splitmix64-style hash of
    (seed, counter) fed through Box-Muller, so the stream is stable
    across platforms and library versions. Not cryptographic; only
    determinism matters here.
    """
    n = int(np.prod(shape))
    idx = np.arange((n + 1) // 2, dtype=np.uint64)
    u1 = _mix64(idx * np.uint64(2), np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    u2 = _mix64(idx * np.uint64(2) + np.uint64(1), np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    # map to (0, 1]; u1 must stay away from 0 for the log
    f1 = (u1.astype(np.float64) + 1.0) / 18446744073709551616.0
    f2 = u2.astype(np.float64) / 18446744073709551616.0
    r = np.sqrt(-2.0 * np.log(f1))
    theta = 2.0 * math.pi * f2
    out = np.empty(2 * idx.size, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(shape)


def _mix64(x: np.ndarray, seed: np.uint64) -> np.ndarray:
    """splitmix64 finalizer over counter + seed."""
    with np.errstate(over="ignore"):
        z = x + seed + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
