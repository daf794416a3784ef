"""Intra/inter-class cosine distance of confident patch embeddings for checkpoints.

    python scripts/cosine_distance.py run_pcl/ckpt run_nopcl/ckpt --data data/eval
"""

import argparse

from apc.data import load_voc_format
from apc.model import load_checkpoint
from apc.train_eval import cosine_distance_stats


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("ckpts", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, default=0.85)
    args = p.parse_args()
    data = load_voc_format(args.data)
    print(f"{'checkpoint':<40} {'intra':>8} {'inter':>8} {'patches':>8}")
    for path in args.ckpts:
        model, _ = load_checkpoint(path)
        s = cosine_distance_stats(model, data, args.eps)
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        print(f"{path:<40} {fmt(s['intra']):>8} {fmt(s['inter']):>8} {s['n_patches']:>8}")


if __name__ == "__main__":
    main()
