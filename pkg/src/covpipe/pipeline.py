"""End-to-end run: preprocess every scan, cross-validate the baseline,
pseudo-label the unlabeled scans with the fold ensemble, fine-tune, score.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline import N_HIST_BINS, BaselineClassifier
from .batch import preprocess_job, run_batch, write_errors
from .ensemble import (
    PSEUDO_THRESHOLD,
    PredictionTable,
    average_ensemble,
    build_finetune_manifest,
    confidence_filter,
    macro_f1,
    select_pseudo_labels,
)
from .resample import target_size
from .splits import N_FOLDS, split_challenge1, split_challenge2
from .validation import check_threshold
from .volume_io import COVID, ScanManifest, load_manifest, write_manifest

logger = logging.getLogger(__name__)

FEATURE_NAMES = [f"hist{k:02d}" for k in range(N_HIST_BINS)] + ["mean", "std", "p90"]


class PipelineError(RuntimeError):
    """A stage produced no usable output."""


@dataclass
class PipelineConfig:
    manifest: str
    output: str
    mode: str = "both"
    size: Optional[str] = None  # defaults to "both" for mode both, else "single"
    val_manifest: Optional[str] = None
    seed: int = 0
    threshold: float = PSEUDO_THRESHOLD
    workers: int = 1
    epochs: int = 300
    lr: float = 0.5
    l2: float = 0.1
    jitter: bool = False
    keep_volumes: bool = False

    def __post_init__(self):
        if self.mode not in ("both", "left", "right"):
            raise ValueError(f"mode must be both, left or right, got {self.mode!r}")
        if self.size is None:
            self.size = "both" if self.mode == "both" else "single"
        target_size(self.size)
        check_threshold(self.threshold)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_json(cls, path, **overrides) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)


def write_features(rows: dict[str, list[float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id"] + FEATURE_NAMES)
        for scan_id, f in rows.items():
            w.writerow([scan_id] + [repr(float(x)) for x in f])


def read_features(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "scan_id":
            raise ValueError(f"{path}: first column must be scan_id")
        return {row[0]: np.array([float(x) for x in row[1:]]) for row in reader if row}


def _metrics(table: PredictionTable, truth) -> dict:
    return macro_f1(table, truth).to_dict()


def _fold_mean_f1(table: PredictionTable, truth, folds) -> float:
    scores = []
    for k in range(N_FOLDS):
        ids = [s for s in folds.fold(k) if s in table.entries]
        if ids:
            sub = PredictionTable({s: table.entries[s] for s in ids})
            scores.append(macro_f1(sub, truth).macro_f1)
    return float(np.mean(scores)) if scores else 0.0


def run_pipeline(config: PipelineConfig) -> tuple[int, dict]:
    """Run every stage; returns ``(exit_code, run_report)``.

    Scans that fail preprocessing are skipped and listed in ``errors.csv``.
    A stage that ends up with nothing to work on is fatal (exit code 2).
    """
    out = Path(config.output)
    seg_dir = out / "segment"
    model_dir = out / "models"
    for d in (seg_dir, model_dir):
        d.mkdir(parents=True, exist_ok=True)
    keep_dir = None
    if config.keep_volumes:
        keep_dir = out / "volumes"
        keep_dir.mkdir(exist_ok=True)

    manifest = load_manifest(config.manifest)
    val = load_manifest(config.val_manifest) if config.val_manifest else ScanManifest()
    everything = ScanManifest(list(manifest.entries) + list(val.entries))

    job = partial(preprocess_job, mode=config.mode, size=config.size, seg_dir=str(seg_dir),
                  jitter_seed=config.seed if config.jitter else None,
                  keep_dir=str(keep_dir) if keep_dir else None)
    outcomes = run_batch(job, everything.entries, config.workers)
    n_failed = write_errors(outcomes, out / "errors.csv", "preprocess")
    done = {o.scan_id: o.value for o in outcomes if o.ok}
    report = {
        "config": asdict(config),
        "stages": {
            "ingest": {"scans": len(everything), "failed": n_failed,
                       "skipped": [o.scan_id for o in outcomes if not o.ok]},
            "segment": {
                "scans": len(done),
                "fallback": sum(r["report"]["fallback"] for r in done.values()),
            },
        },
    }
    write_features({s: r["eval"] for s, r in done.items()}, out / "features.csv")

    def fail(msg):
        report["error"] = msg
        (out / "run_report.json").write_text(json.dumps(report, indent=2) + "\n")
        logger.error(msg)
        return 2, report

    if not done:
        return fail("no scan survived preprocessing")

    labeled = ScanManifest([e for e in manifest.labeled() if e.scan_id in done])
    unlabeled = ScanManifest([e for e in manifest.unlabeled() if e.scan_id in done])
    if config.val_manifest:
        val_ok = ScanManifest([e for e in val.labeled() if e.scan_id in done])
        folds = split_challenge1(labeled, val_ok, config.seed)
        labeled = ScanManifest(list(labeled.entries) + list(val_ok.entries))
    else:
        folds = split_challenge2(labeled, config.seed)
    if not len(labeled):
        return fail("no labeled scans to cross-validate")
    folds.write(out / "folds.csv")
    truth = labeled.labels()
    report["stages"]["split"] = {"scheme": folds.scheme, "fold_sizes": folds.sizes(),
                                 "class_counts": folds.class_counts()}

    def training_rows(ids, labels):
        X, y = [], []
        for s in ids:
            for f in done[s]["train"]:
                X.append(f)
                y.append(1 if labels[s] == COVID else 0)
        return np.array(X), np.array(y)

    def eval_matrix(ids):
        return np.array([done[s]["eval"] for s in ids]).reshape(len(ids), -1)

    unl_ids = unlabeled.ids()
    models, oof, unl_tables = [], {}, []
    try:
        for k in range(N_FOLDS):
            held = folds.fold(k)
            train_ids = [s for s in labeled.ids() if folds.entries[s] != k]
            X, y = training_rows(train_ids, truth)
            m = BaselineClassifier(config.epochs, config.lr, config.l2, config.seed + k).fit(X, y)
            m.save(model_dir / f"fold{k}.json")
            models.append((m, train_ids))
            if held:
                oof.update(zip(held, m.predict_proba(eval_matrix(held))[:, 1].tolist()))
            probs = m.predict_proba(eval_matrix(unl_ids))[:, 1].tolist() if unl_ids else []
            unl_tables.append(PredictionTable(dict(zip(unl_ids, probs)), f"fold{k}"))
    except ValueError as exc:
        return fail(f"training failed: {exc}")

    oof_table = PredictionTable({s: oof[s] for s in labeled.ids()}, "baseline-oof")
    oof_table.save(out / "oof_predictions.csv")
    filtered = confidence_filter(oof_table, config.threshold)
    report["stages"]["train"] = {"models": N_FOLDS, "epochs": config.epochs}
    report["metrics_pre"] = _metrics(oof_table, truth)
    report["metrics_pre"]["fold_mean_macro_f1"] = _fold_mean_f1(oof_table, truth, folds)
    report["metrics_pre_filtered"] = _metrics(filtered, truth)

    ensemble = average_ensemble(unl_tables)
    ensemble.save(out / "unlabeled_ensemble.csv")
    pseudo = select_pseudo_labels(ensemble, config.threshold)
    pseudo.save(out / "pseudo_labels.csv")
    finetune_manifest = build_finetune_manifest(labeled, pseudo, unlabeled)
    write_manifest(finetune_manifest, out / "finetune_manifest.csv", with_origin=True)
    report["stages"]["pseudolabel"] = {"unlabeled": len(unl_ids), "selected": len(pseudo),
                                       "threshold": config.threshold}

    pseudo_labels = {s: lab for s, (lab, _) in pseudo.entries.items()}
    oof_tuned = {}
    for k, (m, train_ids) in enumerate(models):
        labels = {**truth, **pseudo_labels}
        X, y = training_rows(train_ids + list(pseudo_labels), labels)
        tuned = m.fine_tune(X, y)
        tuned.save(model_dir / f"fold{k}_finetuned.json")
        held = folds.fold(k)
        if held:
            oof_tuned.update(zip(held, tuned.predict_proba(eval_matrix(held))[:, 1].tolist()))
    tuned_table = PredictionTable({s: oof_tuned[s] for s in labeled.ids()}, "baseline-oof-finetuned")
    tuned_table.save(out / "oof_finetuned.csv")
    report["stages"]["finetune"] = {"epochs": config.epochs // 3, "pseudo_scans_added": len(pseudo)}
    report["metrics_post"] = _metrics(tuned_table, truth)
    report["metrics_post"]["fold_mean_macro_f1"] = _fold_mean_f1(tuned_table, truth, folds)

    (out / "run_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0, report
