"""Prediction tables: averaging, confidence filtering, pseudo-labels and macro F1."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

from .validation import check_probability, check_threshold
from .volume_io import COVID, NON_COVID, ManifestEntry, ManifestError, ScanManifest

PSEUDO_THRESHOLD = 0.7


class TableMismatch(ValueError):
    pass


@dataclass
class PredictionTable:
    entries: dict[str, float] = field(default_factory=dict)
    source_tag: str = ""

    def __post_init__(self):
        self.entries = {str(k): check_probability(p, f"p_covid[{k}]") for k, p in self.entries.items()}

    def __len__(self):
        return len(self.entries)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "p_covid"])
        for scan_id, p in self.entries.items():
            w.writerow([scan_id, repr(p)])

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)

    @classmethod
    def load(cls, path, source_tag: Optional[str] = None) -> "PredictionTable":
        entries = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["scan_id", "p_covid"]:
                raise ValueError(f"{path}: header must be scan_id,p_covid")
            for row in reader:
                if not row:
                    continue
                if row[0] in entries:
                    raise ValueError(f"{path}: duplicate scan_id {row[0]!r}")
                entries[row[0]] = float(row[1])
        return cls(entries, source_tag if source_tag is not None else str(path))


def confidence(p: float) -> float:
    return max(p, 1.0 - p)


def average_ensemble(tables: Sequence[PredictionTable]) -> PredictionTable:
    """Per-scan arithmetic mean of the member probabilities."""
    if not tables:
        raise ValueError("need at least one prediction table")
    ids = set(tables[0].entries)
    for t in tables[1:]:
        if set(t.entries) != ids:
            diff = sorted(ids ^ set(t.entries))
            raise TableMismatch(f"scan_id sets differ between {tables[0].source_tag!r} and "
                                f"{t.source_tag!r}: {diff[:10]}")
    out = {}
    for scan_id in tables[0].entries:
        ps = [t.entries[scan_id] for t in tables]
        # clamping to the member range keeps k identical copies bit-exact
        out[scan_id] = min(max(math.fsum(ps) / len(ps), min(ps)), max(ps))
    return PredictionTable(out, "mean(" + ",".join(t.source_tag for t in tables) + ")")


@dataclass
class PseudoLabelSet:
    entries: dict[str, tuple[str, float]] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "label", "confidence"])
        for scan_id, (label, conf) in self.entries.items():
            w.writerow([scan_id, label, repr(conf)])

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)

    @classmethod
    def load(cls, path) -> "PseudoLabelSet":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.entries[row["scan_id"]] = (row["label"], float(row["confidence"]))
        return out


def select_pseudo_labels(t: PredictionTable, threshold: float = PSEUDO_THRESHOLD) -> PseudoLabelSet:
    """Keep predictions whose confidence ``max(p, 1 - p)`` reaches ``threshold``."""
    threshold = check_threshold(threshold)
    out = PseudoLabelSet()
    for scan_id, p in t.entries.items():
        c = confidence(p)
        if c >= threshold:
            out.entries[scan_id] = (COVID if p >= 0.5 else NON_COVID, c)
    return out


def confidence_filter(t: PredictionTable, threshold: float) -> PredictionTable:
    threshold = check_threshold(threshold)
    kept = {k: p for k, p in t.entries.items() if confidence(p) >= threshold}
    return PredictionTable(kept, f"{t.source_tag}|conf>={threshold}")


@dataclass
class MetricsReport:
    f1_covid: float
    f1_non_covid: float
    macro_f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_scored: int

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return (self.tp, self.fp, self.fn, self.tn)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "f1_covid": d["f1_covid"],
            "f1_non_covid": d["f1_non_covid"],
            "macro_f1": d["macro_f1"],
            "accuracy": d["accuracy"],
            "confusion": {k: d[k] for k in ("tp", "fp", "fn", "tn")},
            "n_scored": d["n_scored"],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _f1(hit: int, miss_a: int, miss_b: int) -> float:
    denom = 2 * hit + miss_a + miss_b
    return 2 * hit / denom if denom else 0.0


def metrics_from_confusion(tp: int, fp: int, fn: int, tn: int) -> MetricsReport:
    """COVID is the positive class; a class F1 with zero denominator counts as 0."""
    f1_pos = _f1(tp, fp, fn)
    f1_neg = _f1(tn, fn, fp)
    n = tp + fp + fn + tn
    return MetricsReport(f1_pos, f1_neg, (f1_pos + f1_neg) / 2,
                         (tp + tn) / n if n else 0.0, tp, fp, fn, tn, n)


def macro_f1(pred: PredictionTable, truth: Mapping[str, str],
             decision_threshold: float = 0.5) -> MetricsReport:
    tp = fp = fn = tn = 0
    for scan_id, p in pred.entries.items():
        if scan_id not in truth:
            raise KeyError(f"no ground-truth label for scan {scan_id!r}")
        actual = truth[scan_id] == COVID
        predicted = p >= decision_threshold
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return metrics_from_confusion(tp, fp, fn, tn)


def build_finetune_manifest(labeled: ScanManifest, pseudo: PseudoLabelSet,
                            unlabeled: Optional[ScanManifest] = None) -> ScanManifest:
    """Append pseudo-labeled scans to the labeled manifest.

    Paths for pseudo-labeled scans come from ``unlabeled`` when given.
    """
    known = set(labeled.ids())
    paths = {e.scan_id: e.path for e in unlabeled} if unlabeled is not None else {}
    entries = list(labeled.entries)
    for scan_id, (label, _) in pseudo.entries.items():
        if scan_id in known:
            raise ManifestError(f"pseudo-labeled scan {scan_id!r} is already in the labeled manifest")
        entries.append(ManifestEntry(scan_id, paths.get(scan_id, ""), label, origin="pseudo"))
    return ScanManifest(entries)
