"""Windowed mean-field refinement with an appearance-weighted Potts model.

A truncated stand-in for dense CRF post-processing: each pixel exchanges
messages with neighbours inside a (2r+1)^2 window, weighted by
exp(-|dp|^2 / 2 pos_sigma^2 - |dI|^2 / 2 color_sigma^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class CRFConfig:
    iters: int = 5
    pairwise_weight: float = 3.0
    color_sigma: float = 0.1
    pos_sigma: float = 3.0
    radius: int = 5


def _kernel(image: torch.Tensor, radius: int, color_sigma: float, pos_sigma: float):
    """Per-offset neighbour weights, (n_offsets, h, w), zero outside the image."""
    h, w, _ = image.shape
    img = image.permute(2, 0, 1)[None]
    padded = F.pad(img, (radius,) * 4)
    valid = F.pad(torch.ones(1, 1, h, w, dtype=image.dtype), (radius,) * 4)
    weights, offsets = [], []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys, xs = radius + dy, radius + dx
            nb = padded[..., ys : ys + h, xs : xs + w]
            inside = valid[0, 0, ys : ys + h, xs : xs + w]
            color = ((nb - img) ** 2).sum(dim=1)[0]
            k = torch.exp(-(dy * dy + dx * dx) / (2 * pos_sigma**2) - color / (2 * color_sigma**2))
            weights.append(k * inside)
            offsets.append((dy, dx))
    return torch.stack(weights), offsets


def refine(pixel_probs, image, iters: int = 5, pairwise_weight: float = 3.0,
           color_sigma: float = 0.1, pos_sigma: float = 3.0, radius: int = 5) -> np.ndarray:
    """Mean-field updates on (h, w, n) probabilities; returns argmax labels (h, w)."""
    probs = torch.as_tensor(np.asarray(pixel_probs), dtype=torch.float64)
    if probs.dim() != 3:
        raise ValueError(f"expected (h, w, n) probabilities, got {tuple(probs.shape)}")
    sums = probs.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5, rtol=0) or bool((probs < 0).any()):
        raise ValueError("pixel probabilities must be non-negative and sum to 1 per pixel")
    unary = torch.log(probs.clamp(min=1e-12))
    logits = unary
    if iters > 0 and pairwise_weight != 0:
        img = torch.as_tensor(np.asarray(image), dtype=torch.float64)
        if img.shape[:2] != probs.shape[:2]:
            raise ValueError(f"image {tuple(img.shape)} and probabilities {tuple(probs.shape)} differ")
        kern, offsets = _kernel(img, radius, color_sigma, pos_sigma)
        h, w, _ = probs.shape
        q = torch.softmax(logits, dim=-1)
        for _ in range(iters):
            qp = F.pad(q.permute(2, 0, 1), (radius,) * 4)
            msg = torch.zeros_like(q)
            for k, (dy, dx) in zip(kern, offsets):
                nb = qp[:, radius + dy : radius + dy + h, radius + dx : radius + dx + w]
                msg += (k[None] * nb).permute(1, 2, 0)
            # Potts: agreeing with weighted neighbours lowers the energy
            logits = unary + pairwise_weight * msg
            q = torch.softmax(logits, dim=-1)
    return logits.argmax(dim=-1).numpy()
