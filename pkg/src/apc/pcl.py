"""Patch contrastive learning: confidence partitions and the PCE loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm embedding")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def normalized_similarity(u, v) -> float:
    return (1.0 + cosine_similarity(u, v)) / 2.0


@dataclass
class ConfidencePartition:
    high: list[list[int]]  # per class
    low: list[list[int]]
    eps: float

    def n_pos_pairs(self, c: int) -> int:
        n = len(self.high[c])
        return n * (n - 1)

    def n_neg_pairs(self, c: int) -> int:
        return len(self.high[c]) * len(self.low[c])


def check_eps(eps: float) -> None:
    if not 0.5 < eps < 1.0:
        raise ValueError(f"eps must lie in (0.5, 1), got {eps}")


def partition_confidence(Z, eps: float = 0.85) -> ConfidencePartition:
    """High: Z[i, c] > eps. Low: Z[i, c] < 1 - eps."""
    check_eps(eps)
    Z = np.asarray(torch.as_tensor(Z).detach(), dtype=np.float64)
    high = [np.flatnonzero(Z[:, c] > eps).tolist() for c in range(Z.shape[1])]
    low = [np.flatnonzero(Z[:, c] < 1 - eps).tolist() for c in range(Z.shape[1])]
    return ConfidencePartition(high=high, low=low, eps=eps)


def _unit(f: torch.Tensor) -> torch.Tensor:
    norms = f.norm(dim=-1, keepdim=True)
    if bool((norms <= NORM_FLOOR).any()):
        raise DegenerateEmbeddingError("zero-norm patch embedding in PCE")
    return f / norms


def pce_loss(f_out: torch.Tensor, partition: ConfidencePartition, c: int) -> torch.Tensor:
    """PCE for one class of one image; differentiable in ``f_out`` (s, e)."""
    high, low = partition.high[c], partition.low[c]
    zero = f_out.sum() * 0
    if not high:
        return zero
    u = _unit(f_out)
    fh = u[high]
    loss = zero
    if len(high) > 1:
        sbar = (1 + fh @ fh.T) / 2
        off = ~torch.eye(len(high), dtype=torch.bool)
        loss = loss + (1 - sbar[off]).sum() / partition.n_pos_pairs(c)
    if low:
        sbar = (1 + fh @ u[low].T) / 2
        loss = loss + sbar.sum() / partition.n_neg_pairs(c)
    return loss


def pce_batch(f_out: torch.Tensor, Z: torch.Tensor, present: torch.Tensor, eps: float) -> torch.Tensor:
    """Summed PCE over present classes for each image.

    f_out (B, s, e), Z (B, s, C), present (B, C) in {0,1}. Returns (B,).
    Membership of the high/low sets is read from Z without gradient.
    """
    check_eps(eps)
    u = _unit(f_out)
    sbar = (1 + u @ u.transpose(1, 2)) / 2  # (B, s, s)
    with torch.no_grad():
        zt = Z.detach().transpose(1, 2)  # (B, C, s)
        high = (zt > eps).to(f_out.dtype) * present.to(f_out.dtype).unsqueeze(-1)
        low = (zt < 1 - eps).to(f_out.dtype)
        eye = torch.eye(Z.shape[1], dtype=f_out.dtype)
        pos = high.unsqueeze(-1) * high.unsqueeze(-2) * (1 - eye)  # (B, C, s, s)
        neg = high.unsqueeze(-1) * low.unsqueeze(-2)
        n_pos = pos.sum(dim=(-1, -2))
        n_neg = neg.sum(dim=(-1, -2))
    sb = sbar.unsqueeze(1)
    pos_term = (pos * (1 - sb)).sum(dim=(-1, -2)) / n_pos.clamp(min=1)
    neg_term = (neg * sb).sum(dim=(-1, -2)) / n_neg.clamp(min=1)
    return (pos_term + neg_term).sum(dim=1)
