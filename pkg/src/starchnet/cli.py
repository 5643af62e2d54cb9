"""Command-line front end: split, train, eval, predict, report, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every command ends
by writing one ``key=value`` summary line to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint
from .data import (
    SPLITS,
    DatasetManifest,
    ImageLoader,
    decode_image,
    make_batches,
    normalize,
    resize_bilinear,
    scan_dataset,
    stratified_split,
    validate_ratios,
)
from .errors import ArgumentError, ConfigError, StarchNetError
from .metrics import REPORT_FORMATS, ConfusionMatrix, classification_report, confusion_matrix, report
from .models import LOAD_POLICIES, ModelSpec, build_resnet18, load_backbone, model_from_checkpoint
from .seeding import derive_rng
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train

log = logging.getLogger("starchnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _summary(**fields) -> None:
    sys.stdout.flush()
    print(" ".join(f"{k}={v}" for k, v in fields.items()), file=sys.stderr)


def _parse_ratios(text: str):
    try:
        return validate_ratios([float(t) for t in text.split(",")])
    except (ValueError, ArgumentError) as exc:
        raise UsageError(f"bad --ratios {text!r}: {exc}") from exc


def cmd_split(args) -> int:
    ratios = _parse_ratios(args.ratios)
    manifest = stratified_split(scan_dataset(args.data_dir), ratios, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)

    counts = manifest.split_counts()
    width = max(5, *(len(n) for n in manifest.class_names))
    print(f"{'class':<{width}} {'train':>6} {'test':>6} {'val':>6} {'total':>6}")
    totals = dict.fromkeys(SPLITS, 0)
    for name in manifest.class_names:
        c = counts[name]
        print(f"{name:<{width}} {c['train']:>6} {c['test']:>6} {c['val']:>6} {sum(c.values()):>6}")
        for s in SPLITS:
            totals[s] += c[s]
    print(f"{'Total':<{width}} {totals['train']:>6} {totals['test']:>6} {totals['val']:>6} {len(manifest.records):>6}")
    _summary(cmd="split", status="ok", classes=len(manifest.class_names), total=len(manifest.records),
             train=totals["train"], test=totals["test"], val=totals["val"], seed=args.seed,
             warnings=len(manifest.warnings), out=out)
    return 0


def _data_dir(args) -> Path:
    return Path(args.data_dir) if args.data_dir else Path(args.manifest).resolve().parent


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.freeze_backbone:
        overrides["freeze_backbone"] = True
    if overrides:
        config = TrainConfig.from_dict({**config.to_dict(), **overrides})

    manifest = DatasetManifest.load(args.manifest)
    for split in SPLITS:
        if not manifest.split_records(split):
            raise StarchNetError(f"manifest has no {split!r} records; run the split command first")

    spec = ModelSpec(num_classes=len(manifest.class_names), base_width=args.width)
    model = build_resnet18(spec, derive_rng(config.seed, "init"))
    if args.init_checkpoint:
        rep = load_backbone(model, load_checkpoint(args.init_checkpoint), args.load_policy)
        log.info("loaded %d tensors (%d skipped, %d missing)", len(rep.loaded), len(rep.skipped), len(rep.missing))

    loader = ImageLoader(_data_dir(args))

    def train_batches(epoch):
        return make_batches(manifest, "train", loader, config.batch_size, shuffle=True, seed=config.seed,
                            epoch=epoch, augment_images=True, workers=args.workers)

    def val_batches():
        return make_batches(manifest, "val", loader, config.batch_size, workers=args.workers)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = {"architecture": spec.to_dict(), "class_names": manifest.class_names}
    best, history = train(model, train_batches, val_batches, config, metadata, out_dir / "best.ckpt")
    (out_dir / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    best_stats = history.epochs[history.best_epoch - 1]
    print(f"best_epoch={history.best_epoch} val_loss={best_stats.val_loss:.6f}")
    _summary(cmd="train", status="ok", epochs=history.stopped_epoch, best_epoch=history.best_epoch,
             val_loss=repr(best_stats.val_loss), val_accuracy=repr(best_stats.val_accuracy),
             seed=config.seed, out_dir=out_dir)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    manifest = DatasetManifest.load(args.manifest)
    class_names = list(ckpt.metadata.get("class_names", []))
    if class_names != manifest.class_names:
        raise StarchNetError(f"checkpoint classes {class_names} differ from manifest classes {manifest.class_names}")
    batches = make_batches(manifest, args.split, ImageLoader(_data_dir(args), cache=False), args.batch_size,
                           workers=args.workers)
    result = evaluate(model, batches)
    cm = confusion_matrix(result.actual, result.predicted, len(class_names), class_names)
    rep = classification_report(cm)

    if args.format == "json":
        payload = {"split": args.split, "loss": result.loss,
                   "confusion_matrix": {"class_names": class_names, "counts": cm.counts.tolist()},
                   **rep.to_dict()}
        text = json.dumps(payload, indent=2) + "\n"
    elif args.format == "csv":
        text = cm.to_csv() + "\n" + report(cm, fmt="csv")
    else:
        text = "confusion matrix (rows = actual, columns = predicted)\n" + cm.to_csv() + "\n" + report(cm, fmt="text")
    _emit(text, args.out)
    _summary(cmd="eval", status="ok", split=args.split, samples=rep.total, accuracy=repr(rep.accuracy),
             weighted_precision=repr(rep.weighted_precision), weighted_recall=repr(rep.weighted_recall),
             weighted_f1=repr(rep.weighted_f1))
    return 0


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_predict(args) -> int:
    if args.top < 1:
        raise UsageError("--top must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    size = model.spec.input_size
    image = normalize(resize_bilinear(decode_image(args.image), size, size))
    model.eval()
    with no_grad():
        logp = model(Tensor(image.data[None]))
    probs = np.exp(logp.data[0].astype(np.float64))
    names = ckpt.metadata.get("class_names") or [str(i) for i in range(len(probs))]
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[: args.top]
    for i in order:
        print(f"{names[i]}\t{probs[i]:.6f}")
    _summary(cmd="predict", status="ok", image=args.image, top_class=names[order[0]], probability=repr(float(probs[order[0]])))
    return 0


def _read_confusion_csv(path) -> ConfusionMatrix:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
        names = rows[0][1:]
        counts = [[int(v) for v in r[1:]] for r in rows[1:]]
        actual = [r[0] for r in rows[1:]]
    except (OSError, IndexError, ValueError) as exc:
        raise StarchNetError(f"cannot read confusion matrix {path}: {exc}") from exc
    if actual != names:
        raise StarchNetError(f"confusion matrix row labels {actual} do not match column labels {names}")
    return ConfusionMatrix(np.array(counts, dtype=np.int64).reshape(len(names), len(names)), names)


def cmd_report(args) -> int:
    cm = _read_confusion_csv(args.confusion_matrix)
    _emit(report(cm, fmt=args.format), args.out)
    fields = {"cmd": "report", "status": "ok", "classes": cm.num_classes, "samples": cm.total}
    if cm.total:
        rep = classification_report(cm)
        fields.update(accuracy=repr(rep.accuracy), weighted_f1=repr(rep.weighted_f1))
    _summary(**fields)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, args.cases)
    offenders = []
    for name, err in results.items():
        flag = "ok" if err < gradcheck.THRESHOLD else "FAIL"
        print(f"{name:<16} {err:.3e} {flag}")
        if flag == "FAIL":
            offenders.append(name)
    worst = max(results.values())
    if offenders:
        print(f"gradient check failed for: {', '.join(offenders)}", file=sys.stderr)
    _summary(cmd="gradcheck", status="fail" if offenders else "ok", ops=len(results), seed=args.seed,
             max_rel_error=f"{worst:.3e}", offenders=",".join(offenders) or "none")
    return 2 if offenders else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="starchnet", description="Starch microscopy image classifier toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="scan a class-per-directory dataset and write a split manifest")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ratios", default="0.5,0.2,0.3", help="train,test,val fractions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-dir", help="dataset root (default: the manifest's directory)")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--init-checkpoint")
    p.add_argument("--load-policy", choices=LOAD_POLICIES, default="backbone-only")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--width", type=int, default=64, help="backbone base width (64 = standard ResNet-18)")
    p.add_argument("--workers", type=int, default=1, help="image decode threads")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and class report for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-dir", help="dataset root (default: the manifest's directory)")
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.add_argument("--format", choices=REPORT_FORMATS, default="text")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top-K classes for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top", type=int, default=3)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="class report from a confusion-matrix CSV")
    p.add_argument("--confusion-matrix", required=True)
    p.add_argument("--format", choices=REPORT_FORMATS, default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20, help="random shapes per op")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        _summary(status="usage_error")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary(cmd=args.command, status="usage_error")
        return 1
    except (StarchNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary(cmd=args.command, status="error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
