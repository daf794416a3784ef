"""Per-patch class scoring and adaptive-K pooling to image-level scores."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch


class Pooling(str, Enum):
    GAP = "gap"
    GMP = "gmp"
    TOPK_FIXED = "topk"
    AKP = "akp"


@dataclass
class AkpSelection:
    indices: list[int]  # descending score order
    scores: list[float]

    @property
    def k(self) -> int:
        return len(self.indices)


def patch_scores(f_out: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Z = softmax(F_out W) over the class axis. Accepts (s, e) or (B, s, e)."""
    if f_out.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"embedding width {f_out.shape[-1]} does not match classifier rows {weight.shape[0]}"
        )
    return torch.softmax(f_out @ weight, dim=-1)


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on negated scores: ties keep ascending patch index
    return np.argsort(-scores, kind="stable")


def adaptive_k_select(column_scores, K: int, theta: float) -> AkpSelection:
    """Grow the selection from the top-1 score while the top-i mean stays within theta.

    For i = 2..K the mean of the top-i scores is compared with the mean of the
    current selection; the selection becomes the top-i set whenever the ratio
    exceeds ``theta``. All K steps are evaluated.
    """
    scores = np.asarray(column_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("adaptive_k_select needs at least one score")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    order = _descending_order(scores)
    ranked = scores[order]
    means = _prefix_means(ranked[: min(K, scores.size)])
    k = 1
    for i in range(2, means.size + 1):
        if means[i - 1] / means[k - 1] > theta:
            k = i
    return AkpSelection(indices=order[:k].tolist(), scores=ranked[:k].tolist())


def _prefix_means(ranked: np.ndarray) -> np.ndarray:
    means = np.cumsum(ranked) / np.arange(1, ranked.size + 1)
    # exact ties can round a longer prefix mean above a shorter one; the true
    # prefix means of a descending sequence never increase
    return np.minimum.accumulate(means)


def selection_mask(ranked: torch.Tensor, K: int, theta: float) -> torch.Tensor:
    """Vectorised adaptive-K over the last axis of descending-sorted scores.

    ``ranked`` has shape (..., s); returns a {0,1} mask of shape (..., min(K, s))
    marking the selected prefix. Computed without gradient.
    """
    with torch.no_grad():
        kmax = min(K, ranked.shape[-1])
        top = ranked[..., :kmax]
        counts = torch.arange(1, kmax + 1, dtype=top.dtype)
        prefix_means = torch.cummin(torch.cumsum(top, dim=-1) / counts, dim=-1).values
        k = torch.ones(top.shape[:-1], dtype=torch.long)
        for i in range(2, kmax + 1):
            selected_mean = torch.gather(prefix_means, -1, (k - 1).unsqueeze(-1)).squeeze(-1)
            accept = prefix_means[..., i - 1] / selected_mean > theta
            k = torch.where(accept, torch.full_like(k, i), k)
        mask = torch.arange(kmax) < k.unsqueeze(-1)
    return mask.to(top.dtype)


def pool(Z: torch.Tensor, K: int = 6, theta: float = 0.9, mode: Pooling | str = Pooling.AKP) -> torch.Tensor:
    """Image-level class scores from patch scores Z of shape (s, C) or (B, s, C).

    GMP, fixed top-K and AKP share the same selected-prefix average, so GMP is
    AKP with a one-element selection and TOPK is AKP with a full K selection.
    The selection itself carries no gradient.
    """
    mode = Pooling(mode)
    if Z.shape[-2] < 1:
        raise ValueError("pooling needs at least one patch")
    if mode is Pooling.GAP:
        return Z.mean(dim=-2)
    cols = Z.transpose(-1, -2)  # (..., C, s)
    ranked, _ = torch.sort(cols, dim=-1, descending=True, stable=True)
    if mode is Pooling.GMP:
        mask = torch.zeros_like(ranked[..., :1]) + 1
    elif mode is Pooling.TOPK_FIXED:
        mask = torch.ones_like(ranked[..., : min(K, ranked.shape[-1])])
    else:
        mask = selection_mask(ranked, K, theta)
    kmax = mask.shape[-1]
    return (ranked[..., :kmax] * mask).sum(dim=-1) / mask.sum(dim=-1)
