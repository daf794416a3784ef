"""Classification, segmentation and combined objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch

CLAMP = 1e-7
IGNORE = 255


@dataclass
class LossWeights:
    lambda1: float = 0.02
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")


def mce_loss(y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean per-class binary cross-entropy over the last axis."""
    if y.shape != t.shape:
        raise ValueError(f"prediction shape {tuple(y.shape)} != label shape {tuple(t.shape)}")
    y = y.clamp(CLAMP, 1 - CLAMP)
    t = t.to(y.dtype)
    return -(t * torch.log(y) + (1 - t) * torch.log(1 - y)).mean(dim=-1)


def seg_loss(pixel_logits: torch.Tensor, mask: torch.Tensor, ignore_index: int = IGNORE):
    """Mean per-pixel cross-entropy, ignoring ``ignore_index`` pixels.

    ``pixel_logits`` is (h, w, n) or (B, h, w, n); ``mask`` matches its leading
    dims. Returns ``(loss, all_ignored)`` where loss is per image for batched
    input. An image with every pixel ignored contributes 0.
    """
    if pixel_logits.shape[:-1] != mask.shape:
        raise ValueError(f"logits {tuple(pixel_logits.shape)} vs mask {tuple(mask.shape)}")
    single = mask.dim() == 2
    if single:
        pixel_logits, mask = pixel_logits[None], mask[None]
    b, n = mask.shape[0], pixel_logits.shape[-1]
    logp = torch.log_softmax(pixel_logits.reshape(b, -1, n), dim=-1)
    m = mask.reshape(b, -1).long()
    valid = m != ignore_index
    nll = -torch.gather(logp, -1, torch.where(valid, m, 0).unsqueeze(-1)).squeeze(-1)
    counts = valid.sum(dim=1)
    loss = (nll * valid).sum(dim=1) / counts.clamp(min=1)
    all_ignored = counts == 0
    if single:
        return loss[0], bool(all_ignored[0])
    return loss, all_ignored


def total_loss(mce, seg, pce_sum, weights: LossWeights):
    return mce + weights.lambda1 * seg + weights.lambda2 * pce_sum

