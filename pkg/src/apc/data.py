"""Synthetic shapes benchmark and folder-format dataset ingestion.

Folder layout (read by ``load_voc_format``, written by ``save_dataset``)::

    root/
      images/<id>.png      RGB, 8 bit
      labels.txt           one line per image: <id>[,<class_id>]*
      classes.txt          optional; line i (1-based) names foreground class i
      masks/<id>.png       optional; single channel, pixel value = class id (0 = background)

Class ids in ``labels.txt`` are foreground ids 1..C. Blank lines and lines
starting with ``#`` are skipped.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
# per-class hue centre; colours are jittered around it
_HUES = {"circle": 0.0, "square": 1 / 3, "triangle": 2 / 3}


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    t: np.ndarray  # (C,) {0,1}, index c-1 for foreground class c
    gt_mask: np.ndarray | None = None


class SegDataset:
    """In-memory dataset. ``gt_mask`` reads are counted in ``mask_reads``."""

    def __init__(self, ids, images, labels, masks=None, class_names=None):
        self.ids = list(ids)
        self._images = images
        self.labels = np.asarray(labels, dtype=np.uint8)
        self._masks = masks
        self.class_names = list(class_names or [str(c + 1) for c in range(self.labels.shape[1])])
        self.mask_reads = 0

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def has_masks(self) -> bool:
        return self._masks is not None

    def __len__(self) -> int:
        return len(self.ids)

    def image(self, i: int) -> np.ndarray:
        return self._images[i]

    def images(self, idx) -> np.ndarray:
        return np.stack([self.image(int(i)) for i in idx])

    def gt_mask(self, i: int) -> np.ndarray:
        if self._masks is None:
            raise DatasetError("dataset has no ground-truth masks")
        self.mask_reads += 1
        return self._masks[i]

    def index_of(self, image_id: str) -> int:
        try:
            return self.ids.index(image_id)
        except ValueError:
            raise DatasetError(f"unknown image id {image_id!r}") from None

    def __getitem__(self, i: int) -> Sample:
        mask = self.gt_mask(i) if self.has_masks else None
        return Sample(self.ids[i], self.image(i), self.labels[i], mask)


# --------------------------------------------------------------------------- synthetic


def _shape_mask(kind: str, size: int, rng: np.random.Generator, yy, xx):
    if kind == "circle":
        r = rng.uniform(size * 0.09, size * 0.22)
        cy, cx = rng.uniform(r, size - r, 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        side = rng.uniform(size * 0.17, size * 0.4)
        y0, x0 = rng.uniform(0, size - side, 2)
        return (yy >= y0) & (yy < y0 + side) & (xx >= x0) & (xx < x0 + side)
    if kind == "triangle":
        side = rng.uniform(size * 0.22, size * 0.48)
        height = side * np.sqrt(3) / 2
        y0 = rng.uniform(0, size - height)
        x0 = rng.uniform(0, size - side)
        apex = x0 + side / 2
        # inside: below the apex, above the base, between the two slanted edges
        rel = (yy - y0) / height
        return (yy >= y0) & (yy <= y0 + height) & (np.abs(xx - apex) <= rel * side / 2)
    raise ValueError(f"unknown shape {kind!r}")


def _color(kind: str, rng: np.random.Generator) -> np.ndarray:
    hue = (_HUES.get(kind, rng.uniform()) + rng.uniform(-0.07, 0.07)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))


def gen_synthetic(seed: int = 0, n_images: int = 500, image_size: int = 96,
                  classes=SHAPES, max_objects: int = 4, d: int = 16,
                  min_pixels: int = 48, max_retries: int = 20, shading: float = 0.6) -> SegDataset:
    """Random coloured shapes on a low-amplitude noise background.

    Each object is lit by a linear brightness ramp in a random direction
    (brightness falls by up to ``shading`` across it), so patches of one
    object do not all look alike.

    Objects keep at least ``min_pixels`` visible pixels after occlusion;
    otherwise the image is redrawn (bounded by ``max_retries`` per image).
    """
    if image_size % d:
        raise DatasetError(f"image_size {image_size} not divisible by patch side {d}")
    classes = tuple(classes)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    images = np.empty((n_images, image_size, image_size, 3), dtype=np.float32)
    masks = np.empty((n_images, image_size, image_size), dtype=np.uint8)
    labels = np.zeros((n_images, len(classes)), dtype=np.uint8)
    for n in range(n_images):
        for attempt in range(max_retries):
            base = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0, 0.15), rng.uniform(0.3, 0.6))
            img = np.asarray(base) + rng.normal(0, 0.03, (image_size, image_size, 3))
            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            n_obj = int(rng.integers(1, max_objects + 1))
            drawn = []
            for _ in range(n_obj):
                c = int(rng.integers(len(classes)))
                m = _shape_mask(classes[c], image_size, rng, yy, xx)
                color = _color(classes[c], rng)
                angle = rng.uniform(0, 2 * np.pi)
                proj = np.cos(angle) * yy[m] + np.sin(angle) * xx[m]
                ramp = (proj - proj.min()) / max(np.ptp(proj), 1e-9)
                light = 1.0 - shading * ramp
                img[m] = color * light[:, None] + rng.normal(0, 0.03, (int(m.sum()), 3))
                mask[m] = c + 1
                drawn.append((c, m))
            if all((mask[m] == c + 1).sum() >= min_pixels for c, m in drawn):
                break
            log.info("image %d: occluded object on attempt %d, regenerating", n, attempt)
        else:
            raise DatasetError(f"could not place objects for image {n} in {max_retries} tries")
        images[n] = np.clip(img, 0, 1)
        masks[n] = mask
        for c in range(len(classes)):
            labels[n, c] = bool((mask == c + 1).any())
    ids = [f"img{i}" for i in range(n_images)]
    return SegDataset(ids, images, labels, masks, class_names=classes)


# --------------------------------------------------------------------------- folders


def save_dataset(ds: SegDataset, out: Path) -> None:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, image_id in enumerate(ds.ids):
        px = np.round(np.clip(ds.image(i), 0, 1) * 255).astype(np.uint8)
        Image.fromarray(px, "RGB").save(out / "images" / f"{image_id}.png")
        present = [str(c + 1) for c in np.flatnonzero(ds.labels[i])]
        lines.append(",".join([image_id, *present]))
    if ds.has_masks:
        (out / "masks").mkdir(exist_ok=True)
        for i, image_id in enumerate(ds.ids):
            Image.fromarray(ds._masks[i].astype(np.uint8), "L").save(out / "masks" / f"{image_id}.png")
    (out / "labels.txt").write_text("\n".join(lines) + "\n")
    (out / "classes.txt").write_text("\n".join(ds.class_names) + "\n")


def parse_labels_file(path: Path) -> list[tuple[str, list[int]]]:
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if not parts[0]:
            raise DatasetError(f"{path}:{lineno}: missing image id in {raw!r}")
        try:
            cls = [int(p) for p in parts[1:]]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed class id in {raw!r}") from None
        if any(c < 1 for c in cls):
            raise DatasetError(f"{path}:{lineno}: class ids must be >= 1, got {raw!r}")
        entries.append((parts[0], cls))
    return entries


class FolderDataset(SegDataset):
    """Folder-backed dataset; images and masks are decoded on first access."""

    def __init__(self, root, entries, n_classes, class_names, size=None):
        self.root = Path(root)
        self.size = size
        labels = np.zeros((len(entries), n_classes), dtype=np.uint8)
        for i, (_, cls) in enumerate(entries):
            for c in cls:
                if c > n_classes:
                    raise DatasetError(f"class id {c} exceeds the {n_classes} known classes")
                labels[i, c - 1] = 1
        has_masks = (self.root / "masks").is_dir()
        super().__init__([e[0] for e in entries], None, labels, masks=has_masks or None,
                         class_names=class_names)
        self._paths = {}
        for image_id in self.ids:
            self._paths[image_id] = _find_image(self.root / "images", image_id)
        self.image = lru_cache(maxsize=None)(self._load_image)

    def _load_image(self, i: int) -> np.ndarray:
        img = Image.open(self._paths[self.ids[i]]).convert("RGB")
        if self.size and img.size != (self.size, self.size):
            img = img.resize((self.size, self.size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0

    def gt_mask(self, i: int) -> np.ndarray:
        if not self.has_masks:
            raise DatasetError("dataset has no ground-truth masks")
        self.mask_reads += 1
        m = Image.open(self.root / "masks" / f"{self.ids[i]}.png")
        if self.size and m.size != (self.size, self.size):
            m = m.resize((self.size, self.size), Image.NEAREST)
        return np.asarray(m, dtype=np.int64)


def _find_image(folder: Path, image_id: str) -> Path | None:
    for ext in (".png", ".jpg", ".jpeg"):
        p = folder / f"{image_id}{ext}"
        if p.exists():
            return p
    return None


def load_voc_format(root, size: int | None = None, n_classes: int | None = None) -> FolderDataset:
    root = Path(root)
    labels_path = root / "labels.txt"
    if not labels_path.exists():
        raise DatasetError(f"{labels_path} not found")
    entries = parse_labels_file(labels_path)
    missing = [image_id for image_id, _ in entries if _find_image(root / "images", image_id) is None]
    if missing:
        raise DatasetError(f"images missing for ids: {', '.join(missing)}")
    names = None
    if (root / "classes.txt").exists():
        names = [n.strip() for n in (root / "classes.txt").read_text().splitlines() if n.strip()]
    if n_classes is None:
        n_classes = len(names) if names else max((max(c, default=0) for _, c in entries), default=0)
    if names is None or len(names) != n_classes:
        names = [str(c + 1) for c in range(n_classes)]
    return FolderDataset(root, entries, n_classes, names, size=size)
