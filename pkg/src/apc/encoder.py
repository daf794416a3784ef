"""Small ViT-style patch encoder followed by horizontal/vertical BiLSTM refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    depth: int = 4
    heads: int = 4
    e: int = 192
    d: int = 16
    dropout: float = 0.0
    seed: int = 0
    grid: int = 6  # grid side the positional table is allocated for
    mlp_ratio: float = 2.0
    pos_embed: bool = True
    # Chebyshev radius patches may attend over; negative means the whole grid
    attn_window: int = -1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.e % self.heads:
            raise ValueError(f"heads={self.heads} must divide e={self.e}")
        if self.e % 2:
            raise ValueError(f"e must be even for the BiLSTM refinement, got {self.e}")


class Block(nn.Module):
    def __init__(self, e: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(e)
        self.attn = nn.MultiheadAttention(e, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(e)
        hidden = int(e * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(e, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, e), nn.Dropout(dropout)
        )

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def window_mask(grid_h: int, grid_w: int, radius: int) -> torch.Tensor:
    """Boolean (s, s) mask, True where attention is blocked."""
    r = torch.arange(grid_h).repeat_interleave(grid_w)
    c = torch.arange(grid_w).repeat(grid_h)
    far = ((r[:, None] - r[None, :]).abs() > radius) | ((c[:, None] - c[None, :]).abs() > radius)
    return far


class PatchEncoder(nn.Module):
    """Linear patch embedding + learned positions + pre-norm transformer blocks.

    ``forward`` returns ``(F_in, taps)`` where ``taps`` holds the output of every
    block, the last one being ``F_in`` itself (after the final LayerNorm).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.d * cfg.d * 3, cfg.e)
        self.pos = nn.Parameter(torch.zeros(1, cfg.e, cfg.grid, cfg.grid))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            [Block(cfg.e, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.e)

    def positions(self, grid_h: int, grid_w: int) -> torch.Tensor:
        pos = self.pos
        if (grid_h, grid_w) != tuple(pos.shape[-2:]):
            pos = F.interpolate(pos, size=(grid_h, grid_w), mode="bilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def forward(self, patches: torch.Tensor, grid_h: int, grid_w: int):
        expected = self.cfg.d * self.cfg.d * 3
        if patches.shape[-1] != expected or patches.shape[-2] != grid_h * grid_w:
            raise ValueError(
                f"patch tensor {tuple(patches.shape)} does not match d={self.cfg.d}, "
                f"grid {grid_h}x{grid_w}"
            )
        x = self.embed(patches)
        if self.cfg.pos_embed:
            x = x + self.positions(grid_h, grid_w)
        mask = window_mask(grid_h, grid_w, self.cfg.attn_window) if self.cfg.attn_window >= 0 else None
        taps = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, mask)
            taps.append(self.norm(x) if i == len(self.blocks) - 1 else x)
        return taps[-1], taps


class HVBiLSTM(nn.Module):
    """Bidirectional sweep along each grid row, then along each column.

    F_out = F_in + proj(H + V) with H the row sweep of F_in and V the column
    sweep of H. Output shape equals input shape.
    """

    def __init__(self, e: int):
        super().__init__()
        hidden = e // 2
        self.row = nn.LSTM(e, hidden, batch_first=True, bidirectional=True)
        self.col = nn.LSTM(e, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(e, e)

    def forward(self, f_in: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
        b, s, e = f_in.shape
        if s != grid_h * grid_w:
            raise ValueError(f"{s} embeddings do not fill a {grid_h}x{grid_w} grid")
        rows = f_in.reshape(b * grid_h, grid_w, e)
        h = self.row(rows)[0].reshape(b, grid_h, grid_w, e)
        cols = h.transpose(1, 2).reshape(b * grid_w, grid_h, e)
        v = self.col(cols)[0].reshape(b, grid_w, grid_h, e).transpose(1, 2)
        return f_in + self.proj((h + v).reshape(b, s, e))
