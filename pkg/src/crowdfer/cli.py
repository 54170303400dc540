"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Every random stream derives from ``--seed``: trial i trains with seed
``seed + i``, whose SeedSequence children give the weight init (key 0) and
the training stream (key 1, split per epoch into shuffle / PLD draws /
dropout / augmentation). ``synth`` and ``quality-curve`` use
``default_rng(seed)`` directly.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AffineParams
from .dataio import (Dataset, _atomic_write, file_sha256, load_checkpoint, load_dataset,
                     make_synthetic_dataset, save_checkpoint, write_dataset_csv, write_metrics)
from .errors import CrowdFerError
from .labels import EmotionSet, normalize_batch, reject_outliers_batch
from .quality import TaggerNoiseModel, quality_curve, synth_votes
from .schemes import DEFAULT_ML_THRESHOLD, SchemeKind
from .tensornet import build_toy, build_vgg13, gradient_check
from .trainer import TrainConfig, evaluate, run_trials

log = logging.getLogger("crowdfer")


def _emotions(args) -> EmotionSet:
    if getattr(args, "emotions", None):
        return EmotionSet(tuple(n.strip() for n in args.emotions.split(",")))
    return EmotionSet()


def _run_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{command}-{stamp}-seed{args.seed}"


def _write_manifest(out: Path, command: str, config: dict, seed: int, started: str, inputs: dict):
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": dt.datetime.now().isoformat(timespec="seconds"),
        "inputs": inputs,
    }
    _atomic_write(out / "manifest.json", (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode())


def _augment_params(args, size: int):
    if args.no_augment:
        return None
    d = AffineParams.defaults(size)
    return AffineParams(
        max_rotation=d.max_rotation if args.aug_rotate is None else args.aug_rotate,
        max_scale_delta=d.max_scale_delta if args.aug_scale is None else args.aug_scale,
        max_translate=d.max_translate if args.aug_translate is None else args.aug_translate,
        flip_horizontal=args.aug_flip,
    )


def _load(args, image_size=None) -> Dataset:
    return load_dataset(args.data, _emotions(args), image_size=image_size,
                        outlier_threshold=args.outlier_threshold,
                        keep_unusable=args.keep_unusable)


def _image_size(args):
    if args.image_size:
        return args.image_size
    return 64 if args.arch == "vgg13" else None


def cmd_train(args) -> int:
    started = dt.datetime.now().isoformat(timespec="seconds")
    data = _load(args, _image_size(args))
    config = TrainConfig(
        scheme=SchemeKind.parse(args.scheme, args.ml_threshold), epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
        lr_decay=args.lr_decay, lr_decay_at=args.lr_decay_at, seed=args.seed, trials=args.trials,
        outlier_threshold=args.outlier_threshold, pld_per_visit=args.pld_per_visit,
        augment=_augment_params(args, data.image_size), arch=args.arch, toy_blocks=args.toy_blocks,
        toy_width=args.toy_width, toy_hidden=args.toy_hidden, toy_dropout=not args.no_dropout,
        dtype=args.dtype, workers=args.workers,
    )
    out = _run_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"

    def on_trial_end(o):
        save_checkpoint(o.model, {"trial": o.trial, "seed": o.seed, "epoch": config.epochs,
                                  "scheme": config.scheme.scheme.value}, ckpt_dir / f"trial{o.trial}.cfnt")

    report, outcomes = run_trials(data, config, on_trial_end=on_trial_end)
    echo = config.as_dict()
    echo["data"] = str(args.data)
    echo["image_size"] = data.image_size
    history = [{"trial": o.trial, "seed": o.seed, "epochs": o.history} for o in outcomes]
    write_metrics(report, echo, out, data.emotion_set, history)
    _write_manifest(out, "train", echo, args.seed, started,
                    {"data": str(args.data), "data_sha256": file_sha256(args.data),
                     "dataset_fingerprint": data.fingerprint()})
    print(f"{config.scheme}: {report.table_row()}  (trials: "
          + ", ".join(f"{a * 100:.2f}" for a in report.per_trial) + ")")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    started = dt.datetime.now().isoformat(timespec="seconds")
    emotions = _emotions(args)
    model, meta = load_checkpoint(args.checkpoint, K=emotions.K)
    data = load_dataset(args.data, emotions, image_size=model.input_shape[-1],
                        outlier_threshold=args.outlier_threshold, keep_unusable=args.keep_unusable)
    subset = data.select(args.split)
    report = evaluate(model, subset, theta=args.ml_threshold)
    out = _run_dir(args, "eval")
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
              "outlier_threshold": args.outlier_threshold, "checkpoint_metadata": meta}
    write_metrics(report, config, out, emotions)
    _write_manifest(out, "eval", config, args.seed, started,
                    {"data_sha256": file_sha256(args.data), "checkpoint_sha256": file_sha256(args.checkpoint)})
    print(f"accuracy {report.accuracy:.4f} on {report.n_test} {args.split} items; outputs in {out}")
    return 0


def cmd_aggregate(args) -> int:
    emotions = _emotions(args)
    with open(args.votes, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header, body = rows[0], [r for r in rows[1:] if r]
    missing = [e for e in emotions.names if e not in header]
    if missing:
        raise CrowdFerError(f"votes file lacks columns {missing}")
    cols = [header.index(e) for e in emotions.names]
    raw = np.array([[int(r[c]) for c in cols] for r in body], dtype=np.int64)
    cleaned = reject_outliers_batch(raw, args.threshold)
    usable = cleaned.sum(axis=1) > 0
    if args.keep_unusable:
        cleaned = np.where(usable[:, None], cleaned, raw)
        usable = cleaned.sum(axis=1) > 0
    keep = np.flatnonzero(usable)
    dist = normalize_batch(cleaned[keep])
    has_usage = "usage" in header
    out_rows = [["row", *(["usage"] if has_usage else []), *emotions.names, "majority"]]
    for i, p in zip(keep, dist):
        usage = [body[i][header.index("usage")]] if has_usage else []
        out_rows.append([int(i), *usage, *(repr(float(x)) for x in p), emotions.names[int(np.argmax(p))]])
    text = "".join(",".join(map(str, r)) + "\n" for r in out_rows)
    if args.out:
        _atomic_write(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    log.info("aggregated %d items, dropped %d", len(keep), len(raw) - len(keep))
    return 0


def _read_tags(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not rows[0][0].lstrip("-").isdigit():
        rows = rows[1:]
    return np.array([[int(v) for v in r] for r in rows], dtype=np.int64)


def cmd_quality_curve(args) -> int:
    rng = np.random.default_rng(args.seed)
    K = args.K
    if args.tags:
        tags = _read_tags(args.tags)
    else:
        truth = rng.integers(0, K, args.synthetic)
        tags = synth_votes(truth, TaggerNoiseModel.symmetric(K, args.noise), args.taggers, rng)
    curve = quality_curve(tags, args.resamples, rng, K)
    text = curve.to_tsv()
    if args.out:
        _atomic_write(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    scheme = SchemeKind.parse(args.scheme, args.ml_threshold)
    rng = np.random.default_rng(args.seed)
    K = args.K
    worst = None
    for inst in range(args.instances):
        if args.arch == "vgg13":
            model = build_vgg13(args.image_size or 64, K, seed=args.seed + inst)
        else:
            model = build_toy(args.image_size or 8, K, blocks=args.toy_blocks, width=args.toy_width,
                              hidden=args.toy_hidden, seed=args.seed + inst)
        x = rng.random((args.batch,) + model.input_shape)
        p = rng.dirichlet(np.ones(K), size=args.batch)
        drawn = np.array([rng.choice(K, p=row) for row in p])
        rep = gradient_check(model, x, p, scheme, drawn, eps=args.eps, max_coords=args.max_coords, rng=rng)
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    doc = worst.as_dict()
    doc.update({"scheme": args.scheme, "arch": args.arch, "instances": args.instances, "tolerance": args.tol,
                "passed": worst.passed(args.tol)})
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0 if worst.passed(args.tol) else 1


def cmd_synth(args) -> int:
    ds = make_synthetic_dataset(args.items, args.size, 8, noise=args.noise, T=args.taggers, seed=args.seed,
                                outlier_threshold=0, pixel_noise=args.pixel_noise)
    write_dataset_csv(args.out, ds.images * 255.0, ds.raw_votes, ds.split, ds.emotion_set)
    if args.tags_out:
        text = ",".join(f"tag_{t + 1}" for t in range(ds.tags.shape[1])) + "\n"
        text += "".join(",".join(map(str, row)) + "\n" for row in ds.tags)
        _atomic_write(Path(args.tags_out), text.encode())
    print(f"wrote {len(ds)} items to {args.out}")
    return 0


def _common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    p.add_argument("--emotions", help="comma-separated category names (default: the 8 FER+ emotions)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdfer",
        description="Train and evaluate classifiers on crowd-sourced label distributions. "
                    "Majority ties are broken by the lowest category index.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train N trials of one scheme and report mean ± std")
    _common(t)
    t.add_argument("--data", required=True, help="dataset CSV")
    t.add_argument("--scheme", choices=["mv", "ml", "pld", "cel"], default="mv")
    t.add_argument("--ml-threshold", type=float, default=DEFAULT_ML_THRESHOLD, help="ML vote-share threshold")
    t.add_argument("--trials", type=int, default=5)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--lr-decay", type=float, default=0.1)
    t.add_argument("--lr-decay-at", type=float, default=2 / 3, help="fraction of epochs before decay")
    t.add_argument("--arch", choices=["vgg13", "toy"], default="vgg13")
    t.add_argument("--image-size", type=int, help="network input size (default 64 for vgg13, source size for toy)")
    t.add_argument("--toy-blocks", type=int, default=2)
    t.add_argument("--toy-width", type=int, default=16)
    t.add_argument("--toy-hidden", type=int, default=64)
    t.add_argument("--no-dropout", action="store_true", help="toy architecture without dropout")
    t.add_argument("--outlier-threshold", type=int, default=1, help="reset vote counts <= this to zero")
    t.add_argument("--keep-unusable", action="store_true", help="keep raw votes for fully rejected items")
    t.add_argument("--pld-per-visit", action="store_true", help="redraw PLD labels per batch visit")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--aug-rotate", type=float, help="max rotation in degrees (default 15)")
    t.add_argument("--aug-scale", type=float, help="max relative scale change (default 0.1)")
    t.add_argument("--aug-translate", type=float, help="max translation in pixels (default 10%% of width)")
    t.add_argument("--aug-flip", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    t.add_argument("--workers", type=int, default=1, help="threads per minibatch")
    t.add_argument("--out", help="output directory (default runs/train-<time>-seed<seed>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against majority labels")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "validation", "test"], default="test")
    e.add_argument("--ml-threshold", type=float, default=DEFAULT_ML_THRESHOLD)
    e.add_argument("--outlier-threshold", type=int, default=1)
    e.add_argument("--keep-unusable", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("aggregate", help="votes CSV -> label distributions CSV")
    _common(a, seed=False)
    a.add_argument("--votes", required=True)
    a.add_argument("--threshold", type=int, default=1)
    a.add_argument("--keep-unusable", action="store_true")
    a.add_argument("--out")
    a.set_defaults(func=cmd_aggregate)

    q = sub.add_parser("quality-curve", help="majority agreement versus tagger count (TSV)")
    _common(q)
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--tags", help="CSV of per-tagger category indices, one item per row")
    src.add_argument("--synthetic", type=int, metavar="N", help="simulate N items instead")
    q.add_argument("--noise", type=float, default=0.4)
    q.add_argument("--taggers", type=int, default=10)
    q.add_argument("--K", type=int, default=8)
    q.add_argument("--resamples", type=int, default=100)
    q.add_argument("--out")
    q.set_defaults(func=cmd_quality_curve)

    g = sub.add_parser("gradcheck", help="finite-difference check of end-to-end gradients")
    _common(g)
    g.add_argument("--scheme", choices=["mv", "ml", "pld", "cel"], default="cel")
    g.add_argument("--ml-threshold", type=float, default=DEFAULT_ML_THRESHOLD)
    g.add_argument("--arch", choices=["vgg13", "toy"], default="toy")
    g.add_argument("--image-size", type=int)
    g.add_argument("--toy-blocks", type=int, default=2)
    g.add_argument("--toy-width", type=int, default=4)
    g.add_argument("--toy-hidden", type=int, default=16)
    g.add_argument("--K", type=int, default=8)
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--instances", type=int, default=3)
    g.add_argument("--max-coords", type=int, default=None, help="check a random subset per tensor")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic patterned dataset CSV")
    _common(s, seed=True)
    s.add_argument("--out", required=True)
    s.add_argument("--items", type=int, default=2000)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.2, help="symmetric tagger noise")
    s.add_argument("--taggers", type=int, default=10)
    s.add_argument("--pixel-noise", type=float, default=60.0)
    s.add_argument("--tags-out", help="also write per-tagger labels for quality-curve")
    s.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CrowdFerError, ValueError, OSError) as exc:
        print(f"crowdfer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
