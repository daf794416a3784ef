"""Training loop, mIoU evaluation, ablation harness and embedding statistics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .crf import CRFConfig, refine
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .head_akp import Pooling, pool
from .losses import IGNORE, LossWeights, mce_loss, seg_loss, total_loss
from .model import APCNet, ModelConfig, build_model, save_checkpoint
from .patchify import patch_labels_to_pixel_mask, resize_to_multiple
from .pcl import check_eps, pce_batch

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 15
    lr: float = 1e-3
    lr_after: float = 1e-4
    lr_drop_epoch: int = 2  # epochs run at ``lr`` before switching to ``lr_after``
    warmup_steps: int = 0  # linear ramp of ``lr`` over the first optimiser steps
    grad_clip: float = 0.0  # max global grad norm; 0 disables
    K: int = 6
    theta: float = 0.9
    eps: float = 0.85
    beta: float = 0.5
    lambda1: float = 0.02
    lambda2: float = 0.01
    seed: int = 0
    pooling: str = "akp"
    pcl_enabled: bool = True
    ignore_band: bool = False
    background_class: bool = True
    # model size (desk-scale stand-in for ViT-B/16)
    depth: int = 4
    heads: int = 4
    embed_dim: int = 192
    patch: int = 16
    proj_dim: int = 64
    dropout: float = 0.0
    pos_embed: bool = True
    attn_window: int = -1  # -1 global attention, 0 self only, r > 0 local window
    hv_refine: bool = True
    # evaluation
    eval_source: str = "decoder"  # "decoder" or "patch"
    crf: bool = False
    crf_iters: int = 5
    crf_weight: float = 3.0
    crf_color_sigma: float = 0.1
    crf_pos_sigma: float = 3.0
    check_invariants: bool = True
    eval_every_epoch: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.theta < 0:
            raise ConfigError(f"theta must be in [0, inf), got {self.theta}")
        if not 0.5 < self.eps < 1:
            raise ConfigError(f"eps must be in (0.5, 1), got {self.eps}")
        if not 0 <= self.beta <= 1:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.lr <= 0 or self.lr_after <= 0:
            raise ConfigError("learning rates must be > 0")
        try:
            Pooling(self.pooling)
        except ValueError:
            raise ConfigError(f"pooling must be one of gap, gmp, topk, akp; got {self.pooling!r}") from None
        if self.eval_source not in ("decoder", "patch"):
            raise ConfigError(f"eval_source must be decoder or patch, got {self.eval_source!r}")
        if self.embed_dim % self.heads or self.embed_dim % 2:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim} (even)")

    def model_config(self, n_fg: int, image_size: int) -> ModelConfig:
        enc = EncoderConfig(depth=self.depth, heads=self.heads, e=self.embed_dim, d=self.patch,
                            dropout=self.dropout, seed=self.seed, grid=image_size // self.patch,
                            pos_embed=self.pos_embed, attn_window=self.attn_window)
        taps = [-2, -1, "hv"] if self.depth >= 2 else [-1, "hv"]
        dec = DecoderConfig(tap_blocks=taps, proj_dim=self.proj_dim)
        return ModelConfig(n_fg=n_fg, background_class=self.background_class, hv_refine=self.hv_refine,
                           encoder=enc, decoder=dec)

    def crf_config(self) -> CRFConfig:
        return CRFConfig(self.crf_iters, self.crf_weight, self.crf_color_sigma, self.crf_pos_sigma)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: type(f.default) for f in fields(cls)}


@dataclass
class TrainResult:
    model: APCNet
    report: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- targets


def extended_labels(t: torch.Tensor, background_class: bool) -> torch.Tensor:
    """Image labels aligned with the score columns (background always present)."""
    if not background_class:
        return t
    return torch.cat([torch.ones_like(t[..., :1]), t], dim=-1)


def patch_pseudo_labels(Z: torch.Tensor, present: torch.Tensor, background_class: bool,
                        beta: float = 0.5, eps: float = 0.85, ignore_band: bool = False) -> torch.Tensor:
    """Per-patch class ids (0 = background) from scores restricted to present classes.

    Z (B, s, n_scores), present (B, n_scores). With a background column the id is
    the argmax column; without one a patch is background when its best
    foreground score is below ``beta``.
    """
    with torch.no_grad():
        masked = torch.where(present.unsqueeze(1) > 0, Z, torch.full_like(Z, -1.0))
        best, arg = masked.max(dim=-1)
        if background_class:
            labels = arg
            uncertain = best < eps
        else:
            labels = torch.where(best < beta, torch.zeros_like(arg), arg + 1)
            uncertain = (best >= beta) & (best < eps)
        if ignore_band:
            labels = torch.where(uncertain, torch.full_like(labels, IGNORE), labels)
    return labels


def batch_objective(model: APCNet, images: torch.Tensor, t: torch.Tensor, cfg: TrainConfig):
    """Per-image losses and the forward pass for one batch."""
    fwd = model(images)
    present = extended_labels(t.to(fwd.Z.dtype), model.cfg.background_class)
    y = pool(fwd.Z, cfg.K, cfg.theta, cfg.pooling)
    mce = mce_loss(y, present)
    gh, gw = fwd.grid
    patch_lab = patch_pseudo_labels(fwd.Z, present, model.cfg.background_class, cfg.beta, cfg.eps,
                                    cfg.ignore_band)
    pseudo = patch_labels_to_pixel_mask(patch_lab, gh, gw, model.cfg.encoder.d)
    seg, _ = seg_loss(fwd.pixel_logits, pseudo)
    if cfg.pcl_enabled:
        pce = pce_batch(fwd.f_out, fwd.Z, present, cfg.eps)
    else:
        pce = torch.zeros_like(mce)
    loss = total_loss(mce, seg, pce, LossWeights(cfg.lambda1, cfg.lambda2))
    return loss, {"mce": mce, "seg": seg, "pce": pce, "y": y, "fwd": fwd}


def count_violations(Z: torch.Tensor, y: torch.Tensor) -> int:
    with torch.no_grad():
        rows = (Z.sum(dim=-1) - 1).abs() > 1e-6
        out_of_range = (Z < 0) | (Z > 1)
        y_bad = (y < 0) | (y > 1)
    return int(rows.sum() + out_of_range.sum() + y_bad.sum())


# --------------------------------------------------------------------------- training


def _lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr_after


def _tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))


def dataset_loss(model: APCNet, dataset, cfg: TrainConfig) -> float:
    model.eval()
    total, n = 0.0, len(dataset)
    with torch.no_grad():
        for start in range(0, n, 64):
            idx = list(range(start, min(n, start + 64)))
            loss, _ = batch_objective(model, _tensor(dataset.images(idx)),
                                      torch.from_numpy(dataset.labels[idx]), cfg)
            total += float(loss.sum())
    return total / n


def train(dataset, cfg: TrainConfig, eval_dataset=None, out_dir=None, on_epoch=None) -> TrainResult:
    """Minimise the combined objective with Adam; deterministic for a fixed seed.

    Never reads ground-truth masks of ``dataset``; ``eval_dataset`` (if given)
    is used only for per-epoch mIoU.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    torch.set_num_threads(1)
    started = time.perf_counter()
    size = dataset.image(0).shape[0]
    model = build_model(cfg.model_config(dataset.n_classes, size), seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    out_dir = Path(out_dir) if out_dir else None
    log_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.jsonl", "w")

    history, violations, step = [], 0, 0
    init_loss = dataset_loss(model, dataset, cfg)
    try:
        for epoch in range(cfg.max_epochs):
            lr = _lr_for_epoch(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            perm = torch.randperm(len(dataset), generator=gen).tolist()
            sums = {"loss": 0.0, "mce": 0.0, "seg": 0.0, "pce": 0.0}
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                images = _tensor(dataset.images(idx))
                t = torch.from_numpy(dataset.labels[idx])
                per_image, parts = batch_objective(model, images, t, cfg)
                loss = per_image.mean()
                if not torch.isfinite(loss):
                    snap = None
                    if out_dir:
                        snap = out_dir / f"divergence_epoch{epoch + 1}.pt"
                        torch.save({"ids": [dataset.ids[i] for i in idx], "images": images, "labels": t,
                                    "per_image_loss": per_image.detach()}, snap)
                    raise TrainingDivergence(f"non-finite loss at epoch {epoch + 1}", snapshot=snap)
                if cfg.check_invariants:
                    violations += count_violations(parts["fwd"].Z, parts["y"])
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                if step < cfg.warmup_steps:
                    for group in opt.param_groups:
                        group["lr"] = lr * (step + 1) / cfg.warmup_steps
                elif step == cfg.warmup_steps and cfg.warmup_steps:
                    for group in opt.param_groups:
                        group["lr"] = lr
                opt.step()
                step += 1
                sums["loss"] += float(per_image.detach().sum())
                for k in ("mce", "seg", "pce"):
                    sums[k] += float(parts[k].detach().sum())
            row = {"epoch": epoch + 1, "lr": lr, **{k: v / len(dataset) for k, v in sums.items()}}
            if eval_dataset is not None and (cfg.eval_every_epoch or epoch == cfg.max_epochs - 1):
                row["miou"] = evaluate_model(model, eval_dataset, cfg)["miou"]
            history.append(row)
            log.info("epoch %s", row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(row)
    finally:
        if log_file:
            log_file.close()

    metrics = {
        "history": history,
        "loss_init": init_loss,
        "loss_final": dataset_loss(model, dataset, cfg),
        "invariant_violations": violations,
    }
    if eval_dataset is not None:
        metrics["eval"] = evaluate_model(model, eval_dataset, cfg)
    report = {
        "metrics": metrics,
        "run": {"config": asdict(cfg), "wall_clock_s": time.perf_counter() - started,
                "n_train": len(dataset), "n_eval": len(eval_dataset) if eval_dataset is not None else 0},
    }
    if out_dir:
        save_checkpoint(model, out_dir / "ckpt", extra={"train_config": asdict(cfg)})
        (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    model.eval()
    return TrainResult(model, report)


# --------------------------------------------------------------------------- evaluation


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    keep = (gt >= 0) & (gt < n_classes)
    return np.bincount(n_classes * gt[keep] + pred[keep], minlength=n_classes**2).reshape(n_classes, n_classes)


def evaluate_miou(pred_masks, gt_masks, n_classes: int) -> dict:
    """Per-class IoU from the global confusion matrix (rows = GT, cols = prediction).

    Classes absent from both GT and prediction get IoU ``None`` and are left
    out of the mean.
    """
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"{len(pred_masks)} predictions vs {len(gt_masks)} ground-truth masks")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(pred_masks, gt_masks):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"mask shape mismatch: {np.shape(p)} vs {np.shape(g)}")
        cm += confusion_matrix(p, g, n_classes)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    ious = [float(inter[c] / union[c]) if union[c] > 0 else None for c in range(n_classes)]
    valid = [v for v in ious if v is not None]
    return {"per_class_iou": ious, "miou": float(np.mean(valid)) if valid else float("nan"),
            "confusion": cm.tolist()}


@torch.no_grad()
def predict_masks(model: APCNet, dataset, cfg: TrainConfig, batch: int = 32) -> list:
    """Pixel masks for every image: decoder argmax (optionally CRF-refined) or
    the patch-to-pixel map of the scores restricted to the image labels."""
    model.eval()
    out = []
    d = model.cfg.encoder.d
    for start in range(0, len(dataset), batch):
        idx = list(range(start, min(len(dataset), start + batch)))
        imgs = [resize_to_multiple(dataset.image(i), d) for i in idx]
        orig = [dataset.image(i).shape[:2] for i in idx]
        x = _tensor(np.stack(imgs))
        fwd = model(x, decode=cfg.eval_source == "decoder")
        if cfg.eval_source == "patch":
            present = extended_labels(torch.from_numpy(dataset.labels[idx]).to(fwd.Z.dtype),
                                      model.cfg.background_class)
            lab = patch_pseudo_labels(fwd.Z, present, model.cfg.background_class, cfg.beta, cfg.eps)
            masks = patch_labels_to_pixel_mask(lab, *fwd.grid, d)
            logits = F.one_hot(masks, model.cfg.n_seg).to(fwd.Z.dtype)
        else:
            logits = fwd.pixel_logits
        for j, i in enumerate(idx):
            lg = logits[j]
            if tuple(lg.shape[:2]) != tuple(orig[j]):
                lg = F.interpolate(lg.permute(2, 0, 1)[None], size=orig[j], mode="bilinear",
                                   align_corners=False)[0].permute(1, 2, 0)
            if cfg.crf and cfg.eval_source == "decoder":
                c = cfg.crf_config()
                probs = torch.softmax(lg.double(), dim=-1).numpy()
                out.append(refine(probs, dataset.image(i), c.iters, c.pairwise_weight,
                                  c.color_sigma, c.pos_sigma, c.radius))
            else:
                out.append(lg.argmax(dim=-1).numpy())
    return out


def evaluate_model(model: APCNet, dataset, cfg: TrainConfig) -> dict:
    preds = predict_masks(model, dataset, cfg)
    gts = [dataset.gt_mask(i) for i in range(len(dataset))]
    res = evaluate_miou(preds, gts, model.cfg.n_seg)
    res.pop("confusion")
    return res


# --------------------------------------------------------------------------- ablation

POOLING_ORDER = ("gap", "gmp", "topk", "akp")


def ablate_pooling(dataset, eval_dataset, base: TrainConfig, seeds=(0, 1, 2, 3, 4),
                   modes=POOLING_ORDER, pcl=(True, False), on_run=None) -> dict:
    """Train every (pooling, pcl) variant for every seed with identical data order."""
    runs = []
    for mode in modes:
        for use_pcl in pcl:
            for seed in seeds:
                cfg = replace(base, pooling=mode, pcl_enabled=use_pcl, seed=seed, eval_every_epoch=False)
                res = train(dataset, cfg, eval_dataset=eval_dataset)
                stats = cosine_distance_stats(res.model, eval_dataset, cfg.eps)
                row = {"pooling": mode, "pcl": use_pcl, "seed": seed,
                       "miou": res.report["metrics"]["eval"]["miou"],
                       "intra": stats["intra"], "inter": stats["inter"],
                       "violations": res.report["metrics"]["invariant_violations"],
                       "wall_clock_s": res.report["run"]["wall_clock_s"]}
                runs.append(row)
                if on_run:
                    on_run(row)
    return {"runs": runs, "summary": summarize_ablation(runs)}


def summarize_ablation(runs: list) -> list:
    groups = {}
    for r in runs:
        groups.setdefault((r["pooling"], r["pcl"]), []).append(r)
    rows = []
    for (mode, use_pcl), rs in groups.items():
        rows.append({
            "pooling": mode, "pcl": use_pcl,
            "median_miou": float(np.median([r["miou"] for r in rs])),
            "per_seed": [r["miou"] for r in rs],
            "median_intra": _median([r["intra"] for r in rs]),
            "median_inter": _median([r["inter"] for r in rs]),
        })
    return sorted(rows, key=lambda r: -r["median_miou"])


def _median(values) -> float:
    kept = [v for v in values if v is not None]
    return float(np.median(kept)) if kept else float("nan")


def format_table(summary: list) -> str:
    lines = [f"{'rank':>4}  {'pooling':<7} {'pcl':<5} {'median mIoU':>11}  {'intra':>7} {'inter':>7}  per-seed"]
    for rank, r in enumerate(summary, 1):
        seeds = " ".join(f"{v:.4f}" for v in r["per_seed"])
        lines.append(f"{rank:>4}  {r['pooling']:<7} {str(r['pcl']):<5} {r['median_miou']:>11.4f}  "
                     f"{r['median_intra']:>7.4f} {r['median_inter']:>7.4f}  {seeds}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- embedding statistics


def embedding_distance_stats(emb: np.ndarray, labels: np.ndarray) -> dict:
    """Mean cosine distance (1 - cos) within and across classes.

    ``intra`` averages the per-class means over classes with >= 2 members;
    ``inter`` is the mean over all pairs from different classes.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    u = emb / np.maximum(norms, 1e-12)
    dist = 1.0 - np.clip(u @ u.T, -1, 1)
    per_class, skipped = {}, []
    for c in np.unique(labels):
        m = labels == c
        n = int(m.sum())
        if n < 2:
            skipped.append(int(c))
            continue
        block = dist[np.ix_(m, m)]
        per_class[int(c)] = float((block.sum() - np.trace(block)) / (n * (n - 1)))
    diff = labels[:, None] != labels[None, :]
    inter = float(dist[diff].mean()) if diff.any() else None
    intra = float(np.mean(list(per_class.values()))) if per_class else None
    return {"intra": intra, "inter": inter, "per_class_intra": per_class, "skipped": skipped}


@torch.no_grad()
def cosine_distance_stats(model: APCNet, dataset, eps: float = 0.85, max_patches: int = 4000) -> dict:
    """Distances between refined embeddings of confident patches (max score > eps),
    each assigned its argmax class id (0 = background with a background column)."""
    check_eps(eps)
    model.eval()
    embs, labs = [], []
    offset = 0 if model.cfg.background_class else 1
    for start in range(0, len(dataset), 32):
        idx = list(range(start, min(len(dataset), start + 32)))
        fwd = model(_tensor(dataset.images(idx)), decode=False)
        best, arg = fwd.Z.max(dim=-1)
        keep = best > eps
        embs.append(fwd.f_out[keep].double().numpy())
        labs.append((arg[keep] + offset).numpy())
    emb, lab = np.concatenate(embs), np.concatenate(labs)
    if len(lab) > max_patches:
        pick = np.random.default_rng(0).choice(len(lab), max_patches, replace=False)
        emb, lab = emb[np.sort(pick)], lab[np.sort(pick)]
    stats = embedding_distance_stats(emb, lab)
    stats["n_patches"] = int(len(lab))
    return stats


# --------------------------------------------------------------------------- heatmaps


@torch.no_grad()
def heatmap(model: APCNet, image: np.ndarray, class_id: int):
    """Patch scores of one class as a grid and bilinearly upsampled to the image size.

    ``class_id`` uses mask ids: 1..C foreground, 0 background (only with a
    background score column).
    """
    lo = 0 if model.cfg.background_class else 1
    if not lo <= class_id <= model.cfg.n_fg:
        raise ValueError(f"class id {class_id} outside [{lo}, {model.cfg.n_fg}]")
    col = class_id if model.cfg.background_class else class_id - 1
    model.eval()
    h, w = image.shape[:2]
    x = _tensor(resize_to_multiple(image, model.cfg.encoder.d)[None])
    fwd = model(x, decode=False)
    grid = fwd.Z[0, :, col].reshape(*fwd.grid)
    up = F.interpolate(grid[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    return grid.numpy(), up.clamp(0, 1).numpy()


