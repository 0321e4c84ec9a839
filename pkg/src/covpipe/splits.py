"""Deterministic, label-stratified cross-validation folds."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import ScanManifest

CHALLENGE1 = "CHALLENGE1"
CHALLENGE2 = "CHALLENGE2"
N_FOLDS = 5


class SplitError(ValueError):
    pass


@dataclass
class FoldAssignment:
    scheme: str
    seed: int
    entries: dict[str, int] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)

    def fold(self, k: int) -> list[str]:
        return [s for s, f in self.entries.items() if f == k]

    def sizes(self) -> list[int]:
        counts = Counter(self.entries.values())
        return [counts.get(k, 0) for k in range(N_FOLDS)]

    def class_counts(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for scan_id, f in self.entries.items():
            out.setdefault(self.labels[scan_id], [0] * N_FOLDS)[f] += 1
        return out

    def write(self, path) -> None:
        """Write the fold CSV and a ``.json`` sidecar holding scheme and seed."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scan_id", "label", "fold"])
            for scan_id, f in self.entries.items():
                w.writerow([scan_id, self.labels[scan_id], f])
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({"scheme": self.scheme, "seed": self.seed}, indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "FoldAssignment":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        fa = cls(meta["scheme"], int(meta["seed"]))
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                fold = int(row["fold"])
                if not 0 <= fold < N_FOLDS:
                    raise SplitError(f"fold index {fold} out of range for {row['scan_id']}")
                fa.entries[row["scan_id"]] = fold
                fa.labels[row["scan_id"]] = row["label"]
        return fa


def _require_labels(manifest: ScanManifest):
    missing = [e.scan_id for e in manifest if e.label is None]
    if missing:
        raise SplitError(f"unlabeled entries cannot be assigned to folds: {missing[:5]}")


def _stratified(manifest: ScanManifest, k: int, seed: int) -> dict[str, int]:
    """Shuffle within each class, then deal round-robin across ``k`` folds.

    The dealing cursor carries over between classes, so both per-class and
    total fold sizes differ by at most one.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for e in manifest:
        by_class.setdefault(e.label, []).append(e.scan_id)
    folds = {}
    cursor = 0
    for label in sorted(by_class):
        ids = by_class[label]
        for j in rng.permutation(len(ids)):
            folds[ids[j]] = cursor % k
            cursor += 1
    return folds


def split_challenge1(train: ScanManifest, official_val: ScanManifest, seed: int) -> FoldAssignment:
    """Folds 0-3 from the training set, fold 4 is the official validation set."""
    _require_labels(train)
    _require_labels(official_val)
    overlap = set(train.ids()) & set(official_val.ids())
    if overlap:
        raise SplitError(f"training and validation manifests share scan_ids: {sorted(overlap)[:5]}")
    assigned = _stratified(train, N_FOLDS - 1, seed)
    fa = FoldAssignment(CHALLENGE1, seed)
    for e in train:
        fa.entries[e.scan_id] = assigned[e.scan_id]
        fa.labels[e.scan_id] = e.label
    for e in official_val:
        fa.entries[e.scan_id] = N_FOLDS - 1
        fa.labels[e.scan_id] = e.label
    return fa


def split_challenge2(merged: ScanManifest, seed: int) -> FoldAssignment:
    _require_labels(merged)
    assigned = _stratified(merged, N_FOLDS, seed)
    fa = FoldAssignment(CHALLENGE2, seed)
    for e in merged:
        fa.entries[e.scan_id] = assigned[e.scan_id]
        fa.labels[e.scan_id] = e.label
    return fa
