"""Command-line entry point: ``apc {gen-data,train,eval,ablate,heatmap}``.

Exit codes: 0 success, 2 usage/configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SHAPES, DatasetError, gen_synthetic, load_voc_format, save_dataset
from .model import load_checkpoint
from .train_eval import (
    ConfigError,
    TrainConfig,
    TrainingDivergence,
    ablate_pooling,
    evaluate_model,
    format_table,
    heatmap,
    train,
)

log = logging.getLogger("apc")

# short flag names for the most used hyperparameters
ALIASES = {"K": "k", "max_epochs": "epochs", "batch_size": "batch"}


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name: str, raw: str):
    kind = TrainConfig.field_types()[name]
    try:
        if kind is bool:
            return _parse_bool(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    """Plain-text ``key = value`` lines; ``#`` starts a comment."""
    known = TrainConfig.field_types()
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = {v: k for k, v in ALIASES.items()}.get(key, key)
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    for f in fields(TrainConfig):
        flag = "--" + ALIASES.get(f.name, f.name).replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default), default=None,
                           help=f"default {f.default}")
    p.add_argument("--no-pcl", dest="pcl_enabled", action="store_false", default=None)


def build_config(args) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def eval_split(data: Path):
    data = Path(data)
    return load_voc_format(data / "eval") if (data / "eval" / "labels.txt").exists() else load_voc_format(data)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    ds = gen_synthetic(seed=args.seed, n_images=args.n, image_size=args.size, classes=classes,
                       max_objects=args.max_objects)
    save_dataset(ds, out)
    if args.n_eval:
        ev = gen_synthetic(seed=args.seed + 1_000_003, n_images=args.n_eval, image_size=args.size,
                           classes=classes, max_objects=args.max_objects)
        save_dataset(ev, out / "eval")
    print(f"wrote {len(ds)} images to {out}" + (f" and {args.n_eval} to {out / 'eval'}" if args.n_eval else ""))
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    data = load_voc_format(args.data)
    ev = eval_split(args.data)
    out = Path(args.out)

    def report(row):
        miou = f" mIoU={row['miou']:.4f}" if "miou" in row else ""
        print(f"epoch {row['epoch']:>3} lr={row['lr']:.0e} loss={row['loss']:.4f}{miou}", flush=True)

    try:
        res = train(data, cfg, eval_dataset=ev, out_dir=out, on_epoch=report)
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}; snapshot: {exc.snapshot}", file=sys.stderr)
        return 3
    # remember where the data lives so heatmap/eval can find images by id
    from .model import save_checkpoint

    save_checkpoint(res.model, out / "ckpt", extra={"train_config": asdict(cfg),
                                                    "data_dir": str(Path(args.data).resolve())})
    final = res.report["metrics"]["eval"]
    print(f"mIoU: {final['miou']!r}")
    print(f"report: {out / 'report.json'}")
    return 0


def _load_ckpt(path):
    p = Path(path)
    if p.is_dir():
        p = p / "ckpt"
    if not p.exists():
        raise UsageError(f"checkpoint {p} not found")
    try:
        return load_checkpoint(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    model, extra = _load_ckpt(args.ckpt)
    cfg = TrainConfig(**extra.get("train_config", {}))
    if args.eval_source:
        cfg = replace(cfg, eval_source=args.eval_source)
    if args.crf is not None:
        cfg = replace(cfg, crf=args.crf)
    ev = eval_split(args.data)
    res = evaluate_model(model, ev, cfg)
    names = ["background", *ev.class_names]
    for name, iou in zip(names, res["per_class_iou"]):
        print(f"  {name:<12} {'-' if iou is None else f'{iou:.4f}'}")
    print(f"mIoU: {res['miou']!r}")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    data = load_voc_format(args.data)
    ev = eval_split(args.data)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))

    def progress(row):
        print(f"  {row['pooling']:<5} pcl={row['pcl']!s:<5} seed={row['seed']} mIoU={row['miou']:.4f}", flush=True)

    result = ablate_pooling(data, ev, cfg, seeds=seeds, on_run=progress)
    print(format_table(result["summary"]))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"config": asdict(cfg), **result}, indent=2))
    return 0


def cmd_heatmap(args) -> int:
    model, extra = _load_ckpt(args.ckpt)
    if Path(args.image).is_file():
        image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
        stem = Path(args.image).stem
    else:
        data_dir = args.data or extra.get("data_dir")
        if not data_dir:
            raise UsageError("--data is required to look up an image id")
        ds = load_voc_format(data_dir)
        image, stem = ds.image(ds.index_of(args.image)), args.image
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in args.class_ids:
        try:
            _, up = heatmap(model, image, c)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        path = out / f"{stem}_class{c}.png"
        Image.fromarray(np.round(up * 255).astype(np.uint8), "L").save(path)
        print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=0, help="also write an eval split to OUT/eval")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--classes", default=",".join(SHAPES))
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="run")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-source", choices=["decoder", "patch"])
    p.add_argument("--crf", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pooling x PCL ablation over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", help="write the full ablation result as JSON")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="per-class patch probability maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="image id in the dataset, or a path")
    p.add_argument("--class", dest="class_ids", type=int, nargs="+", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="heatmaps")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError) as exc:
        print(f"apc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"apc {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
