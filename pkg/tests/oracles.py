"""Independent reference computations used as test oracles.

Deliberately naive: plain Python loops, no shared code with the package.
"""

import math

import numpy as np


def akp_walker(scores, K, theta):
    """Adaptive K selection written out step by step over Python lists."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranked = [scores[i] for i in order]
    selected = ranked[:1]
    for i in range(2, K + 1):
        current = ranked[:i]
        mean_current = sum(current) / len(current)
        mean_selected = sum(selected) / len(selected)
        if mean_current / mean_selected > theta:
            selected = current
    return order[: len(selected)], selected


def cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def pce_pairwise(high, low):
    """PCE of one class from explicit lists of high/low embeddings."""
    pos = [(1 - (1 + cos(high[i], high[j])) / 2) for i in range(len(high)) for j in range(len(high)) if i != j]
    neg = [(1 + cos(h, l)) / 2 for h in high for l in low]
    return (sum(pos) / len(pos) if pos else 0.0) + (sum(neg) / len(neg) if neg else 0.0)


def miou_per_pixel(preds, gts, n_classes):
    inter = [0] * n_classes
    union = [0] * n_classes
    for p, g in zip(preds, gts):
        for a, b in zip(np.asarray(p).ravel().tolist(), np.asarray(g).ravel().tolist()):
            for c in range(n_classes):
                inp, ing = a == c, b == c
                inter[c] += inp and ing
                union[c] += inp or ing
    ious = [inter[c] / union[c] if union[c] else None for c in range(n_classes)]
    valid = [x for x in ious if x is not None]
    return ious, (sum(valid) / len(valid) if valid else float("nan"))


def pixel_mask_loop(patch_classes, grid_h, grid_w, d):
    out = np.zeros((grid_h * d, grid_w * d), dtype=np.int64)
    for y in range(grid_h * d):
        for x in range(grid_w * d):
            out[y, x] = patch_classes[(y // d) * grid_w + (x // d)]
    return out


def central_diff(f, x, h=1e-6):
    """Gradient of scalar f at numpy array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
