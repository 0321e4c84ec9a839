"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error. Batch subcommands keep
going past bad scans and list them in ``errors.csv`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np

from . import batch
from .baseline import BaselineClassifier
from .ensemble import (
    PSEUDO_THRESHOLD,
    PredictionTable,
    PseudoLabelSet,
    average_ensemble,
    build_finetune_manifest,
    confidence_filter,
    macro_f1,
    select_pseudo_labels,
)
from .phantoms import generate_dataset
from .pipeline import PipelineConfig, read_features, run_pipeline, write_features
from .splits import FoldAssignment, split_challenge1, split_challenge2
from .volume_io import COVID, ManifestEntry, ScanManifest, load_labels, load_manifest, write_manifest

log = logging.getLogger("covpipe")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _finish_batch(outcomes, out: Path, stage: str, paths=None) -> int:
    """Write errors.csv and, when ``paths`` is given, a manifest of outputs."""
    failed = batch.write_errors(outcomes, out / "errors.csv", stage)
    if paths is not None:
        write_manifest(ScanManifest(paths), out / "manifest.csv")
    for o in outcomes:
        if not o.ok:
            log.error("%s: %s", o.scan_id, o.error)
    return EXIT_DATA if failed else EXIT_OK


def _relabel(manifest, outcomes):
    labels = {e.scan_id: e.label for e in manifest}
    return [ManifestEntry(o.scan_id, o.value, labels[o.scan_id]) for o in outcomes if o.ok]


def cmd_ingest(a) -> int:
    m = load_manifest(a.manifest)
    out = _out_dir(a.output)
    outcomes = batch.run_batch(partial(batch.ingest_job, out_dir=str(out)), m.entries, a.workers)
    return _finish_batch(outcomes, out, "ingest", _relabel(m, outcomes))


def cmd_phantom(a) -> int:
    dims = tuple(int(x) for x in a.dims.split(","))
    if len(dims) != 3:
        raise UsageError("--dims takes nx,ny,nz")
    generate_dataset(a.n, a.seed, a.positive_fraction, a.output, unlabeled=a.unlabeled,
                     dims=dims, noise_sigma=a.noise_sigma, workers=a.workers)
    return EXIT_OK


def cmd_segment(a) -> int:
    m = load_manifest(a.manifest)
    out = _out_dir(a.output)
    outcomes = batch.run_batch(partial(batch.segment_job, out_dir=str(out)), m.entries, a.workers)
    summary = [o.value for o in outcomes if o.ok]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return _finish_batch(outcomes, out, "segment")


def cmd_crop(a) -> int:
    m = load_manifest(a.manifest)
    out = _out_dir(a.output)
    job = partial(batch.crop_job, reports_dir=a.reports, mode=a.mode, out_dir=str(out))
    outcomes = batch.run_batch(job, m.entries, a.workers)
    return _finish_batch(outcomes, out, "crop", _relabel(m, outcomes))


def cmd_resample(a) -> int:
    m = load_manifest(a.manifest)
    out = _out_dir(a.output)
    outcomes = batch.run_batch(partial(batch.resample_job, size=a.size, out_dir=str(out)),
                               m.entries, a.workers)
    return _finish_batch(outcomes, out, "resample", _relabel(m, outcomes))


def cmd_augment(a) -> int:
    m = load_manifest(a.manifest)
    out = _out_dir(a.output)
    seed = None if a.no_jitter else a.seed
    outcomes = batch.run_batch(partial(batch.augment_job, seed=seed, out_dir=str(out)),
                               m.entries, a.workers)
    labels = {e.scan_id: e.label for e in m}
    entries = [
        ManifestEntry(Path(p).name, p, labels[o.scan_id])
        for o in outcomes if o.ok for p in o.value
    ]
    return _finish_batch(outcomes, out, "augment", entries)


def cmd_split(a) -> int:
    m = load_manifest(a.manifest)
    if a.scheme == "challenge1":
        if not a.val_manifest:
            raise UsageError("--scheme challenge1 needs --val-manifest")
        folds = split_challenge1(m, load_manifest(a.val_manifest), a.seed)
    else:
        folds = split_challenge2(m, a.seed)
    folds.write(a.output)
    return EXIT_OK


def _emit_table(table, output):
    if output:
        table.save(output)
    else:
        table.write_csv(sys.stdout)


def cmd_ensemble(a) -> int:
    tables = [PredictionTable.load(p) for p in a.pred]
    _emit_table(average_ensemble(tables), a.output)
    return EXIT_OK


def cmd_pseudolabel(a) -> int:
    _emit_table(select_pseudo_labels(PredictionTable.load(a.pred), a.threshold), a.output)
    return EXIT_OK


def cmd_finetune_manifest(a) -> int:
    labeled = load_manifest(a.manifest)
    pseudo = PseudoLabelSet.load(a.pseudo)
    unlabeled = load_manifest(a.unlabeled_manifest) if a.unlabeled_manifest else None
    write_manifest(build_finetune_manifest(labeled, pseudo, unlabeled), a.output, with_origin=True)
    return EXIT_OK


def cmd_features(a) -> int:
    m = load_manifest(a.manifest)
    outcomes = batch.run_batch(batch.features_job, m.entries, a.workers)
    write_features({o.scan_id: o.value for o in outcomes if o.ok}, a.output)
    errors = Path(a.output).with_name(Path(a.output).stem + ".errors.csv")
    failed = batch.write_errors(outcomes, errors, "features")
    return EXIT_DATA if failed else EXIT_OK


def _xy(features, labels, ids):
    X = np.vstack([features[s] for s in ids])
    y = np.array([1 if labels[s] == COVID else 0 for s in ids])
    return X, y


def cmd_train_baseline(a) -> int:
    features = read_features(a.features)
    labels = load_labels(a.labels)
    ids = [s for s in features if s in labels]
    if a.folds is not None and a.holdout is not None:
        fa = FoldAssignment.read(a.folds)
        ids = [s for s in ids if fa.entries.get(s) != a.holdout]
    if not ids:
        raise ValueError("no labeled feature rows to train on")
    X, y = _xy(features, labels, ids)
    if a.init:
        model = BaselineClassifier.load(a.init).fine_tune(X, y, epochs=a.epochs, lr=a.lr)
    else:
        model = BaselineClassifier(a.epochs if a.epochs is not None else 300,
                                   a.lr if a.lr is not None else 0.5, a.l2, a.seed).fit(X, y)
    model.save(a.output)
    return EXIT_OK


def cmd_predict_baseline(a) -> int:
    model = BaselineClassifier.load(a.model)
    features = read_features(a.features)
    ids = list(features)
    probs = model.predict_proba(np.vstack([features[s] for s in ids]))[:, 1] if ids else []
    _emit_table(PredictionTable(dict(zip(ids, map(float, probs))), a.model), a.output)
    return EXIT_OK


def cmd_score(a) -> int:
    pred = PredictionTable.load(a.pred)
    if a.confidence is not None:
        pred = confidence_filter(pred, a.confidence)
    text = macro_f1(pred, load_labels(a.truth), a.decision_threshold).to_json()
    if a.output:
        Path(a.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pipeline(a) -> int:
    overrides = dict(manifest=a.manifest, output=a.output, mode=a.mode, size=a.size,
                     val_manifest=a.val_manifest, seed=a.seed, threshold=a.threshold,
                     workers=a.workers, epochs=a.epochs, jitter=True if a.jitter else None)
    if a.config:
        cfg = PipelineConfig.from_json(a.config, **overrides)
    else:
        if not a.manifest or not a.output:
            raise UsageError("pipeline needs --config or both --manifest and --output")
        cfg = PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
    code, report = run_pipeline(cfg)
    if code == EXIT_OK:
        summary = {k: report[k]["macro_f1"] for k in ("metrics_pre", "metrics_pre_filtered", "metrics_post")}
        summary["pseudo_labels"] = report["stages"]["pseudolabel"]["selected"]
        print(json.dumps(summary))
    return code


def _threshold(text):
    t = float(text)
    if not 0.5 < t <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0.5, 1], got {t}")
    return t


def _workers(p):
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="covpipe", description="Lung cropping, resampling and pseudo-labeling for CT volumes.")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("ingest", help="slice stacks or RVOL files to RVOL")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--unlabeled", type=int, default=0)
    p.add_argument("--dims", default="128,128,128")
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segment", help="per-scan segmentation reports")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("crop", help="apply crops from segmentation reports")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--mode", choices=["both", "left", "right"], default="both")
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("resample", help="trilinear resampling to a preset size")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", choices=["both", "single"], default="both")
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("augment", help="original + mirrored views with brightness/contrast jitter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-jitter", action="store_true")
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="five-fold cross-validation assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--scheme", choices=["challenge1", "challenge2"], default="challenge2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("ensemble", help="average prediction tables")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("pseudolabel", help="select confident predictions as labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--threshold", type=_threshold, default=PSEUDO_THRESHOLD)
    p.add_argument("--output")
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("finetune-manifest", help="labeled manifest plus pseudo-labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--unlabeled-manifest")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_finetune_manifest)

    p = sub.add_parser("features", help="histogram features per scan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    _workers(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-baseline", help="train (or fine-tune with --init) the baseline")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True, help="any CSV with scan_id,label columns")
    p.add_argument("--folds")
    p.add_argument("--holdout", type=int)
    p.add_argument("--init", help="model JSON to fine-tune from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("predict-baseline", help="probabilities from a baseline model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_predict_baseline)

    p = sub.add_parser("score", help="macro F1 of a prediction table")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--confidence", type=_threshold, help="score only predictions this confident")
    p.add_argument("--decision-threshold", type=float, default=0.5)
    p.add_argument("--output")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pipeline", help="end-to-end run")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--output")
    p.add_argument("--mode", choices=["both", "left", "right"])
    p.add_argument("--size", choices=["both", "single"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=_threshold)
    p.add_argument("--epochs", type=int)
    p.add_argument("--jitter", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
