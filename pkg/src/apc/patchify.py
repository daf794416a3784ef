"""Patch partitioning and patch-to-pixel label mapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class DimensionMismatchError(ValueError):
    pass


@dataclass
class PatchGrid:
    patches: np.ndarray  # (s, d, d, 3), row-major
    grid_h: int
    grid_w: int
    d: int

    @property
    def s(self) -> int:
        return self.grid_h * self.grid_w


def partition(image: np.ndarray, d: int) -> PatchGrid:
    """Split an (h, w, 3) image into a row-major grid of d x d patches."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionMismatchError(f"expected (h, w, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h <= 0 or w <= 0 or h % d or w % d:
        raise DimensionMismatchError(f"image {h}x{w} (h={h}, w={w}) not divisible by patch side d={d}")
    gh, gw = h // d, w // d
    patches = image.reshape(gh, d, gw, d, -1).swapaxes(1, 2).reshape(gh * gw, d, d, -1)
    return PatchGrid(patches=patches, grid_h=gh, grid_w=gw, d=d)


def reassemble(grid: PatchGrid) -> np.ndarray:
    gh, gw, d = grid.grid_h, grid.grid_w, grid.d
    return grid.patches.reshape(gh, gw, d, d, -1).swapaxes(1, 2).reshape(gh * d, gw * d, -1)


def patchify_batch(images: torch.Tensor, d: int) -> torch.Tensor:
    """(B, h, w, 3) -> (B, s, d*d*3) flattened row-major patches."""
    b, h, w, ch = images.shape
    if h % d or w % d:
        raise DimensionMismatchError(f"image {h}x{w} (h={h}, w={w}) not divisible by patch side d={d}")
    gh, gw = h // d, w // d
    x = images.reshape(b, gh, d, gw, d, ch).transpose(2, 3)
    return x.reshape(b, gh * gw, d * d * ch)


def patch_labels_to_pixel_mask(patch_classes, grid_h: int, grid_w: int, d: int):
    """Give every pixel the class of the patch containing it.

    Works on numpy arrays or torch tensors; a leading batch dimension is allowed
    (shape (..., s) -> (..., grid_h*d, grid_w*d)).
    """
    s = grid_h * grid_w
    if patch_classes.shape[-1] != s:
        raise DimensionMismatchError(
            f"got {patch_classes.shape[-1]} patch labels for a {grid_h}x{grid_w} grid"
        )
    lead = patch_classes.shape[:-1]
    grid = patch_classes.reshape(*lead, grid_h, 1, grid_w, 1)
    if isinstance(grid, torch.Tensor):
        grid = grid.expand(*lead, grid_h, d, grid_w, d)
    else:
        grid = np.broadcast_to(grid, (*lead, grid_h, d, grid_w, d))
    return grid.reshape(*lead, grid_h * d, grid_w * d)


def resize_to_multiple(image: np.ndarray, d: int) -> np.ndarray:
    """Bilinear resize of an (h, w, 3) image to the nearest multiple of d on each side."""
    h, w = image.shape[:2]
    nh = max(d, int(round(h / d)) * d)
    nw = max(d, int(round(w / d)) * d)
    if (nh, nw) == (h, w):
        return image
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()
