"""MLP segmentation head over multi-level patch features."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DecoderConfig:
    # negative indices count from the last transformer block; "hv" is the BiLSTM output
    tap_blocks: list = field(default_factory=lambda: [-2, -1, "hv"])
    proj_dim: int = 64
    upsample: str = "bilinear"

    def __post_init__(self):
        if not self.tap_blocks:
            raise ValueError("decoder needs at least one tapped level")
        if self.upsample not in ("bilinear", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")


class MLPDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, e: int, n_out: int, d: int):
        super().__init__()
        self.cfg = cfg
        self.d = d
        self.proj = nn.ModuleList([nn.Linear(e, cfg.proj_dim) for _ in cfg.tap_blocks])
        self.fuse = nn.Sequential(
            nn.Linear(cfg.proj_dim * len(cfg.tap_blocks), cfg.proj_dim),
            nn.GELU(),
            nn.Linear(cfg.proj_dim, n_out),
        )

    def select_levels(self, block_taps: list, hv_out: torch.Tensor) -> list:
        levels = []
        for tap in self.cfg.tap_blocks:
            if tap == "hv":
                levels.append(hv_out)
            else:
                if not -len(block_taps) <= int(tap) < len(block_taps):
                    raise ValueError(f"tap block {tap} out of range for depth {len(block_taps)}")
                levels.append(block_taps[int(tap)])
        return levels

    def patch_logits(self, levels: list) -> torch.Tensor:
        if len(levels) != len(self.proj):
            raise ValueError(f"decoder built for {len(self.proj)} levels, got {len(levels)}")
        return self.fuse(torch.cat([p(f) for p, f in zip(self.proj, levels)], dim=-1))

    def forward(self, levels: list, grid_h: int, grid_w: int) -> torch.Tensor:
        """(B, s, e) levels -> pixel logits (B, grid_h*d, grid_w*d, n_out)."""
        logits = self.patch_logits(levels)
        b, s, n = logits.shape
        grid = logits.transpose(1, 2).reshape(b, n, grid_h, grid_w)
        size = (grid_h * self.d, grid_w * self.d)
        if self.cfg.upsample == "bilinear":
            up = F.interpolate(grid, size=size, mode="bilinear", align_corners=False)
        else:
            up = F.interpolate(grid, size=size, mode="nearest")
        return up.permute(0, 2, 3, 1)
