"""``bonesup`` command line: phantom -> train -> translate -> evaluate.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import ClassifierConfig, load_classifier, save_classifier, train_classifier
from .config import merge, read_config, write_config
from .errors import BoneSupError, ConfigError, DivergenceError, FormatError, UsageError
from .evaluation import evaluate_model
from .pgm import read_pgm, write_image
from .phantom import Dataset, PhantomConfig, generate_dataset
from .splits import SplitSpec
from .training import TrainConfig, to_signed, train_paired, train_unpaired

log = logging.getLogger("bonesup")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
RESOLVED = "config.resolved"
TRAIN_KEYS = list(TrainConfig.field_names()) + ["target"]
PHANTOM_KEYS = ["count", "size", "rho", "seed", "easy_blobs", "blob_probability", "noise", "max_shift"]
TARGETS = ("de", "soft")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} {path!r} does not exist")


# -- phantom -----------------------------------------------------------------

def cmd_phantom(args):
    values = read_config(args.config, PHANTOM_KEYS) if args.config else {}
    values = merge(
        values,
        {"count": args.count, "size": args.size, "rho": args.rho, "seed": args.seed,
         "easy_blobs": args.easy_blobs or None},
    )
    resolved = {
        "count": values.get("count", 200),
        "size": values.get("size", 64),
        "rho": values.get("rho", 0.05),
        "seed": values.get("seed", 0),
        "easy_blobs": bool(values.get("easy_blobs", False)),
        "blob_probability": values.get("blob_probability", 0.5),
        "noise": values.get("noise", 0.01),
        "max_shift": values.get("max_shift", None),
    }
    base = PhantomConfig.easy_blobs if resolved["easy_blobs"] else PhantomConfig
    size = int(resolved["size"])
    max_shift = resolved["max_shift"]
    if max_shift is None:
        max_shift = min(4, max(1, (size - 1) // 8))
        resolved["max_shift"] = max_shift
    cfg = base(
        image_size=size,
        misregistration_fraction=float(resolved["rho"]),
        blob_probability=float(resolved["blob_probability"]),
        noise=float(resolved["noise"]),
        max_shift=int(max_shift),
    )
    count = int(resolved["count"])
    seed = int(resolved["seed"])
    rows = generate_dataset(cfg, count, args.out, SplitSpec(seed=seed), seed=seed)
    write_config(resolved, os.path.join(args.out, RESOLVED))
    log.info("wrote %d phantoms to %s", len(rows), args.out)
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _train_config(args):
    values = read_config(args.config, TRAIN_KEYS) if args.config else {}
    values = merge(
        values,
        {"mode": args.mode, "seed": args.seed, "epochs": args.epochs, "max_steps": args.max_steps},
    )
    target = values.pop("target", "de") or "de"
    if target not in TARGETS:
        raise ConfigError(f"target must be one of {TARGETS}")
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, target


def cmd_train(args):
    _require_dir(args.data, "data directory")
    dataset = Dataset(args.data)
    cfg, target = _train_config(args)
    train_ids = dataset.ids("train")
    if not train_ids:
        raise ConfigError("dataset has no training samples")
    val_ids = dataset.ids("val")
    source = to_signed(dataset.load("standard", train_ids))
    if target == "de":
        tgt = to_signed(dataset.load_de_soft(train_ids))
    else:
        tgt = to_signed(dataset.load("soft", train_ids))
    if source.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ConfigError(f"dataset images are {source.shape[1:]}, config image_size is {cfg.image_size}")
    validation = None
    if val_ids and dataset.has_layer("soft"):
        validation = (to_signed(dataset.load("standard", val_ids)), to_signed(dataset.load("soft", val_ids)))

    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = None
    if cfg.checkpoint_every:
        ckpt_dir = os.path.join(args.out, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    if cfg.mode == "paired":
        model, history = train_paired((source, tgt), cfg, validation, ckpt_dir)
    else:
        # pools are used independently; canonical ordering inside the trainer drops pairing
        model, history = train_unpaired(source, tgt, cfg, validation, ckpt_dir)
    save_checkpoint(model, os.path.join(args.out, "model.bsgc"))
    history.write(os.path.join(args.out, "history.tsv"))
    write_config(dict(cfg.to_dict(), target=target), os.path.join(args.out, RESOLVED))
    return EXIT_OK


# -- translate ---------------------------------------------------------------

def _pgm_files(root):
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name.lower().endswith(".pgm"):
                found.append(os.path.relpath(os.path.join(dirpath, name), root))
    return found


def cmd_translate(args):
    _require_dir(args.input, "input directory")
    if os.path.abspath(args.input) == os.path.abspath(args.out):
        raise UsageError("--out must differ from --in")
    model = load_checkpoint(args.model)
    direction = "reverse" if args.reverse else "forward"
    files = _pgm_files(args.input)
    decoded = []
    for rel in files:
        samples, maxval = read_pgm(os.path.join(args.input, rel))
        decoded.append((rel, samples, maxval))
    for rel, samples, maxval in decoded:
        image = (samples.astype(np.float64) / maxval).astype(np.float32)
        out = model.translate(image[None], direction)[0]
        dest = os.path.join(args.out, rel)
        os.makedirs(os.path.dirname(dest) or ".", exist_ok=True)
        write_image(out, dest, maxval=maxval)
    write_config(
        {"model": os.path.basename(args.model), "direction": direction, "files": len(files)},
        os.path.join(args.out, RESOLVED),
    )
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------

def _identity(images):
    return np.asarray(images, dtype=np.float32).copy()


def cmd_evaluate(args):
    _require_dir(args.data, "data directory")
    dataset = Dataset(args.data)
    if args.model == "identity":
        model, model_id = _identity, "identity"
    else:
        model, model_id = load_checkpoint(args.model), os.path.basename(args.model)
    classifier = load_classifier(args.classifier) if args.classifier else None
    direction = "reverse" if args.reverse else "forward"
    config = {
        "split": args.split,
        "direction": direction,
        "classifier": os.path.basename(args.classifier) if args.classifier else None,
    }
    out_dir = os.path.dirname(os.path.abspath(args.report))
    os.makedirs(out_dir, exist_ok=True)
    report = evaluate_model(
        model, dataset, args.report, split=args.split, classifier=classifier,
        model_id=model_id, direction=direction, config=config,
    )
    for key in ("ssim", "psnr"):
        agg = report.aggregates[key]
        if agg["count"]:
            log.info("%s mean=%s std=%s stderr=%s n=%d", key, agg["mean"], agg["std"], agg["stderr"], agg["count"])
    if report.auc:
        log.info("auc=%s", report.auc["value"])
    return EXIT_OK


# -- train-classifier --------------------------------------------------------

def cmd_train_classifier(args):
    _require_dir(args.data, "data directory")
    dataset = Dataset(args.data)
    ids = dataset.ids("train") + dataset.ids("val")
    images = dataset.load("standard", ids)
    if args.model:
        images = load_checkpoint(args.model).translate(images)
    cfg = ClassifierConfig(seed=args.seed, **({"epochs": args.epochs} if args.epochs else {}))
    clf = train_classifier(images, dataset.labels(ids), cfg)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_classifier(clf, args.out)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="bonesup", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic dual-energy dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--rho", type=float, help="fraction of misregistered samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--easy-blobs", action="store_true", help="large, bright lesions")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a paired or unpaired translation model")
    p.add_argument("--mode", choices=("paired", "unpaired"))
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="suppress bones in every PGM under a directory")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reverse", action="store_true", help="apply G_TS of an unpaired model")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="SSIM/PSNR (and optional AUC) report on a split")
    p.add_argument("--model", required=True, help="checkpoint path, or 'identity'")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier")
    p.add_argument("--split", default="test")
    p.add_argument("--reverse", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-classifier", help="fit the abnormality classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="translate images with this checkpoint first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"bonesup: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"bonesup: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError) as exc:
        print(f"bonesup: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, BoneSupError) as exc:
        print(f"bonesup: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
