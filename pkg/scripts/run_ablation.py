"""Pooling x PCL ablation on the synthetic benchmark.

    python scripts/run_ablation.py --seeds 5 --out results/ablation.json

Uses scripts/desk.conf unless --config is given. Prints the ranked table and
the cosine-distance medians of each variant.
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from apc.cli import read_config_file
from apc.data import gen_synthetic
from apc.train_eval import POOLING_ORDER, TrainConfig, ablate_pooling, format_table

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=HERE / "desk.conf")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--modes", default=",".join(POOLING_ORDER))
    p.add_argument("--out")
    args = p.parse_args()

    cfg = TrainConfig(**read_config_file(args.config))
    train_set = gen_synthetic(seed=args.data_seed, n_images=args.n_train, d=cfg.patch)
    eval_set = gen_synthetic(seed=args.data_seed + 1, n_images=args.n_eval, d=cfg.patch)
    seeds = range(args.first_seed, args.first_seed + args.seeds)

    def progress(row):
        print(f"{row['pooling']:<5} pcl={row['pcl']!s:<5} seed={row['seed']} mIoU={row['miou']:.4f} "
              f"intra={row['intra']:.4f} ({row['wall_clock_s']:.0f}s)", flush=True)

    res = ablate_pooling(train_set, eval_set, cfg, seeds=seeds, modes=args.modes.split(","),
                         on_run=progress)
    print(format_table(res["summary"]))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"config": asdict(cfg), **res}, indent=2))


if __name__ == "__main__":
    main()
