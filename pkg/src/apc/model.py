"""Full patch-classification network: encoder, HV refinement, scorer, decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .decoder import DecoderConfig, MLPDecoder
from .encoder import EncoderConfig, HVBiLSTM, PatchEncoder
from .head_akp import patch_scores
from .patchify import patchify_batch

CKPT_FORMAT = "apc-checkpoint/1"


@dataclass
class ModelConfig:
    n_fg: int = 3
    # score column 0 is background when true; otherwise Z covers foreground only
    background_class: bool = True
    hv_refine: bool = True  # false skips the BiLSTM sweeps (F_out = F_in)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    @property
    def n_scores(self) -> int:
        return self.n_fg + int(self.background_class)

    @property
    def n_seg(self) -> int:
        return self.n_fg + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["decoder"] = DecoderConfig(**d["decoder"])
        return cls(**d)


@dataclass
class Forward:
    f_in: torch.Tensor  # (B, s, e)
    f_out: torch.Tensor  # (B, s, e)
    Z: torch.Tensor  # (B, s, n_scores)
    pixel_logits: torch.Tensor | None  # (B, h, w, n_seg)
    grid: tuple


class APCNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg.encoder)
        self.hv = HVBiLSTM(cfg.encoder.e) if cfg.hv_refine else None
        self.W = nn.Parameter(torch.empty(cfg.encoder.e, cfg.n_scores))
        nn.init.normal_(self.W, std=cfg.encoder.e**-0.5)
        self.decoder = MLPDecoder(cfg.decoder, cfg.encoder.e, cfg.n_seg, cfg.encoder.d)

    def forward(self, images: torch.Tensor, decode: bool = True) -> Forward:
        """images: (B, h, w, 3) in [0, 1]."""
        d = self.cfg.encoder.d
        gh, gw = images.shape[1] // d, images.shape[2] // d
        patches = patchify_batch(images.to(self.W.dtype), d)
        f_in, taps = self.encoder(patches, gh, gw)
        f_out = self.hv(f_in, gh, gw) if self.hv is not None else f_in
        Z = patch_scores(f_out, self.W)
        logits = None
        if decode:
            logits = self.decoder(self.decoder.select_levels(taps, f_out), gh, gw)
        return Forward(f_in, f_out, Z, logits, (gh, gw))


def build_model(cfg: ModelConfig, seed: int | None = None) -> APCNet:
    gen_seed = cfg.encoder.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(gen_seed)
        return APCNet(cfg)


def save_checkpoint(model: APCNet, path, extra: dict | None = None) -> None:
    """Checkpoint archive: a torch-serialised dict

    ``{"format": "apc-checkpoint/1", "model_config": {...}, "state_dict": {name: tensor}, "extra": {...}}``
    containing only tensors and plain Python values (loadable with ``weights_only=True``).
    """
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CKPT_FORMAT,
            "model_config": model.cfg.to_dict(),
            "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[APCNet, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not an {CKPT_FORMAT} archive")
    cfg = ModelConfig.from_dict(blob["model_config"])
    model = APCNet(cfg)
    first = next(iter(blob["state_dict"].values()))
    model.to(first.dtype)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
