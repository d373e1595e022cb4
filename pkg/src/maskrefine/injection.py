"""Attention-bias construction and application for coarse-mask injection.

A coarse foreground mask is turned into two binary bias matrices, one
for cross attention (image query x text key) and one for self attention
(image query x image query). Adding a scaled bias to the pre-softmax
logits steers probability mass toward the masked region and the class
tokens without touching any weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .types import (
    BinaryMask,
    SoftMask,
    TokenIndexSet,
    ValidationError,
    resample_mask,
)


@dataclass(frozen=True)
class InjectionMask:
    """Binary q x k (cross) or q x q (self) attention bias matrix."""

    bits: np.ndarray
    kind: str  # "cross" | "self"

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ValidationError(f"injection mask must be 2-D, got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("injection mask must be binary")
        if self.kind not in ("cross", "self"):
            raise ValidationError(f"unknown injection kind {self.kind!r}")
        arr = np.ascontiguousarray(arr.astype(np.uint8))
        if self.kind == "self":
            if arr.shape[0] != arr.shape[1]:
                raise ValidationError("self-injection mask must be square")
            if not np.array_equal(arr, arr.T):
                raise ValidationError("self-injection mask must be symmetric")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]


class InjectionPair(NamedTuple):
    cross: InjectionMask
    self_: InjectionMask


@dataclass(frozen=True)
class AttentionLogits:
    """Query/key matrices with the usual 1/sqrt(d) logit scale."""

    q: np.ndarray  # (q, d)
    k: np.ndarray  # (k, d)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        k = np.asarray(self.k, dtype=np.float64)
        if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
            raise ValidationError(
                f"Q and K must be 2-D with equal dim, got {q.shape} and {k.shape}"
            )
        if q.shape[1] == 0:
            raise ValidationError("attention dim must be positive")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
            raise ValidationError("attention inputs must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.q.shape[1])


def build_cross_injection(mask_1d: np.ndarray, tokens: TokenIndexSet,
                          key_length: int) -> InjectionMask:
    """Bias matrix pairing foreground pixels with class-token columns.

    A[i, j] = 1 iff j is a class-token index and pixel i is foreground.
    """
    s = np.asarray(mask_1d).reshape(-1)
    if not np.isin(s, (0, 1)).all():
        raise ValidationError("flattened mask must be binary")
    tokens.check_key_length(key_length)
    bits = np.zeros((s.size, key_length), dtype=np.uint8)
    if len(tokens):
        cols = np.fromiter(tokens, dtype=np.int64)
        bits[np.ix_(s.astype(bool), cols)] = 1
    return InjectionMask(bits, kind="cross")


def build_self_injection(mask_1d: np.ndarray) -> InjectionMask:
    """Bias matrix pairing foreground pixels with each other.

    A[i, j] = S[i] * S[j]: the outer product of the flattened mask with
    itself, hence symmetric.
    """
    s = np.asarray(mask_1d).reshape(-1)
    if not np.isin(s, (0, 1)).all():
        raise ValidationError("flattened mask must be binary")
    bits = np.outer(s, s).astype(np.uint8)
    return InjectionMask(bits, kind="self")


def row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def inject_attention(logits: AttentionLogits, mask: InjectionMask,
                     alpha_inject: float) -> np.ndarray:
    """Biased attention: softmax((Q K^T + alpha * A) / sqrt(d)).

    Returns a row-stochastic (q, k) matrix. alpha_inject = 0 reproduces
    vanilla attention.
    """
    scores = logits.q @ logits.k.T
    if mask.bits.shape != scores.shape:
        raise ValidationError(
            f"injection mask {mask.bits.shape} does not match logits {scores.shape}"
        )
    biased = (scores + alpha_inject * mask.bits) * logits.scale
    return row_softmax(biased)


def prepare_injection_set(
    coarse: SoftMask,
    threshold: float,
    tokens: TokenIndexSet,
    attention_resolutions,
    key_length: int,
) -> dict[tuple[int, int], InjectionPair]:
    """Per-resolution cross/self bias pair from one coarse soft mask.

    The coarse mask is binarized at ``threshold``, nearest-resampled to
    each attention grid, flattened row-major, and turned into both bias
    matrices. Resolutions may be ints (square grids) or (h, w) pairs.
    """
    resolutions = list(attention_resolutions)
    if not resolutions:
        raise ValidationError("empty attention resolution list")
    hard = coarse.binarize(threshold)
    out: dict[tuple[int, int], InjectionPair] = {}
    for res in resolutions:
        h, w = (res, res) if isinstance(res, int) else (int(res[0]), int(res[1]))
        resampled = resample_mask(hard.as_soft(), h, w)
        s1d = BinaryMask(resampled.values.astype(np.uint8)).flatten()
        out[(h, w)] = InjectionPair(
            cross=build_cross_injection(s1d, tokens, key_length),
            self_=build_self_injection(s1d),
        )
    return out
