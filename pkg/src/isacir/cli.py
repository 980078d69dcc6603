"""Command-line entry point.

Commands: gen-data, train, embed-gallery, eval, gradcheck, export-attention.
Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import fileio
from . import pipeline as pl
from . import retrieval as rv
from .config import PROFILES, ConfigError, RunConfig, resolve
from .datagen import Dataset, gen_dataset

log = logging.getLogger("isacir")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DATASET_FILE = "dataset.jsonl"
CHECKPOINT_FILE = "checkpoint.isac"
LOSS_FILE = "loss.csv"
GALLERY_FILE = "gallery.isae"
METRICS_FILE = "metrics.txt"


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for data, teacher and training")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: run)")
    common.add_argument("--profile", default="toy", choices=sorted(PROFILES), help="base configuration")
    common.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                        metavar="KEY=VALUE", help="override one config key, e.g. train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="isacir", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the query-side student")
    p.add_argument("--data", type=Path, help=f"dataset file (default: OUT/{DATASET_FILE}, generated if absent)")
    p.add_argument("--mode", choices=("asymmetric", "symmetric"))
    p.add_argument("--loss", choices=sorted(pl.LOSS_VARIANTS), default="full")
    p.add_argument("--token-length", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed-gallery", parents=[common], help="write gallery features of the teacher")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path, help="take the config from this checkpoint")
    p.set_defaults(func=cmd_embed_gallery)

    p = sub.add_parser("eval", parents=[common], help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--gallery", type=Path, help="embedding file (default: rebuilt from the teacher)")
    p.add_argument("--baselines", action="store_true", help="add image-only, text-only and image+text rows")
    p.add_argument("--token-length-sweep", type=_int_list, metavar="L1,L2,...",
                   help="train and evaluate each token length over --sweep-seeds")
    p.add_argument("--sweep-seeds", type=_int_list, default=[0, 1, 2])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--max-coords", type=int, default=16, help="coordinates sampled per parameter")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", parents=[common], help="spatial attention of one image")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--image-id", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


# -- helpers ------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    return resolve(args.profile, args.config, dict(args.overrides), args.seed)


def _dataset_path(args) -> Path:
    return args.data if getattr(args, "data", None) is not None else args.out / DATASET_FILE


def _load_dataset(args, cfg: RunConfig) -> Dataset:
    path = _dataset_path(args)
    if path.exists():
        dataset, _ = fileio.read_dataset(path)
        if dataset.config != cfg.data:
            log.warning("dataset %s was generated with a different data config", path)
        return dataset
    if getattr(args, "data", None) is not None:
        raise FileNotFoundError(f"dataset file not found: {path}")
    log.info("no dataset at %s; generating from config", path)
    return gen_dataset(cfg.data)


def _load_checkpoint(args):
    path = args.checkpoint if args.checkpoint is not None else args.out / CHECKPOINT_FILE
    ckpt = fileio.read_checkpoint(path)
    cfg, teacher = pl.restore(ckpt)
    return ckpt, cfg, teacher


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    dataset = gen_dataset(cfg.data)
    path = args.out / DATASET_FILE
    fileio.write_dataset(path, dataset, cfg.flat())
    print(f"wrote {path}: {len(dataset.train)} train, {len(dataset.gallery)} gallery, "
          f"{len(dataset.triplets)} triplets")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg = pl.with_loss_variant(cfg, args.loss)
    model = cfg.model
    if args.mode is not None:
        model = replace(model, mode=args.mode)
    if args.token_length is not None:
        model = replace(model, token_length=args.token_length)
    cfg = replace(cfg, model=model)
    dataset = _load_dataset(args, cfg)
    start = time.perf_counter()
    ckpt = pl.train_model(cfg, dataset, on_epoch=lambda row: log.info(
        "epoch %d gcd %.4f lar %.4f total %.4f", row["epoch"], row["gcd"], row["lar"], row["total"]))
    fileio.write_checkpoint(args.out / CHECKPOINT_FILE, ckpt)
    fileio.write_loss_table(args.out / LOSS_FILE, ckpt.history)
    last = ckpt.history[-1] if ckpt.history else {"total": float("nan")}
    print(f"wrote {args.out / CHECKPOINT_FILE} ({len(ckpt.history)} epochs, final loss "
          f"{last['total']:.4f}, {time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def cmd_embed_gallery(args) -> int:
    if args.checkpoint is not None:
        _, cfg, teacher = _load_checkpoint(args)
    else:
        cfg = resolve_config(args)
        teacher = pl.make_teacher(cfg)
    dataset = _load_dataset(args, cfg)
    index = rv.build_index(dataset.gallery, teacher)
    path = args.out / GALLERY_FILE
    fileio.write_index(path, index, cfg.flat())
    print(f"wrote {path}: {len(index)} x {index.vectors.shape[1]}")
    return EXIT_OK


def _print_metrics(metrics: dict[str, float]) -> None:
    for k, v in metrics.items():
        print(f"{k} = {v:.4f}")


def cmd_eval(args) -> int:
    if args.token_length_sweep:
        cfg = resolve_config(args)
        table = pl.token_length_sweep(cfg, args.token_length_sweep, args.sweep_seeds,
                                      progress=lambda L, s, m: log.info("L=%d seed=%d R@1 %.3f",
                                                                        L, s, m["recall@1"]))
        metrics = pl.sweep_metrics(table)
        names = list(next(iter(table.values())))
        print(f"{'L':>3s} " + " ".join(f"{k:>18s}" for k in names))
        for length, row in table.items():
            print(f"{length:3d} " + " ".join(f"{m:8.4f} +- {s:6.4f}" for m, s in row.values()))
        fileio.write_metrics(args.out / METRICS_FILE, metrics,
                             {**cfg.flat(), "sweep.lengths": ",".join(map(str, args.token_length_sweep)),
                              "sweep.seeds": ",".join(map(str, args.sweep_seeds))})
        return EXIT_OK

    ckpt, cfg, teacher = _load_checkpoint(args)
    dataset = _load_dataset(args, cfg)
    index = None
    if args.gallery is not None:
        index, _ = fileio.read_index(args.gallery)
    metrics = pl.evaluate(cfg, dataset, ckpt.params, teacher, index, args.baselines)
    _print_metrics(metrics)
    fileio.write_metrics(args.out / METRICS_FILE, metrics, cfg.flat())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    start = time.perf_counter()
    results = pl.gradcheck(cfg, args.seeds, args.batch, args.max_coords, corrupt=args.corrupt)
    for r in results:
        print(f"seed {r.seed} loss {r.loss}: max rel error {r.report.max_rel_error:.3e}")
        for line in r.report.lines():
            print("  " + line)
    worst = max(r.report.max_rel_error for r in results)
    ok = pl.gradcheck_passes(results, args.tol)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} (tol {args.tol:g}), "
          f"{time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_export_attention(args) -> int:
    ckpt, cfg, teacher = _load_checkpoint(args)
    dataset = _load_dataset(args, cfg)
    images = {img.id: img for img in dataset.gallery + dataset.train}
    if args.image_id not in images:
        raise LookupError(f"unknown image id {args.image_id!r}")
    rows = pl.attention_rows(ckpt.params, cfg, teacher, images[args.image_id])
    path = args.out / f"attention_{args.image_id}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(fileio.encode_attention(rows, args.image_id, cfg.data.grid))
    print(f"wrote {path}: {rows.shape[0]} tokens x {rows.shape[1]} pixels")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"isacir: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, LookupError, RuntimeError, fileio.FormatError) as exc:
        print(f"isacir: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
