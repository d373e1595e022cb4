"""Mask-to-attention-bias construction and biased attention.

The coarse foreground mask becomes two binary bias matrices per
attention grid: a cross bias pairing foreground pixels with the class
token columns, and a self bias pairing foreground pixels with each
other. Applied as softmax((Q K^T + alpha * A) / sqrt(d)).
"""

from __future__ import annotations

import torch


def nearest_indices(src: int, dst: int) -> torch.Tensor:
    idx = torch.floor((torch.arange(dst, dtype=torch.float64) + 0.5) * src / dst)
    return idx.long().clamp_(0, src - 1)


def resample_nearest(mask: torch.Tensor, h: int, w: int) -> torch.Tensor:
    ys = nearest_indices(mask.shape[0], h)
    xs = nearest_indices(mask.shape[1], w)
    return mask[ys][:, xs]


def flatten_mask(coarse: torch.Tensor, threshold: float, h: int, w: int) -> torch.Tensor:
    """Binarize at threshold, nearest-resample to (h, w), flatten row-major."""
    hard = (coarse >= threshold).to(torch.float32)
    return resample_nearest(hard, h, w).reshape(-1)


def cross_bias(mask_1d: torch.Tensor, token_indices, key_length: int) -> torch.Tensor:
    bias = torch.zeros(mask_1d.numel(), key_length, dtype=torch.float32)
    cols = torch.as_tensor(sorted(token_indices), dtype=torch.long)
    if cols.numel():
        bias[:, cols] = mask_1d[:, None]
    return bias


def self_bias(mask_1d: torch.Tensor) -> torch.Tensor:
    return torch.outer(mask_1d, mask_1d)


def biased_attention(q: torch.Tensor, k: torch.Tensor, bias: torch.Tensor | None,
                     alpha: float) -> torch.Tensor:
    """Row-stochastic attention with an optional additive logit bias."""
    scores = q @ k.transpose(-1, -2)
    if bias is not None and alpha != 0.0:
        scores = scores + alpha * bias
    return torch.softmax(scores / (q.shape[-1] ** 0.5), dim=-1)
