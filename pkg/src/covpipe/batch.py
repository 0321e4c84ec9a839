"""Per-scan jobs and an order-preserving worker pool.

Every job is a module-level function of one manifest entry, so it can be
shipped to worker processes. Failures are captured per scan; results always
come back in manifest order, whatever the worker count.
"""

from __future__ import annotations

import csv
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .baseline import extract_features
from .resample import apply_jitter, draw_jitter, expand_training_views, resample_trilinear
from .segmentation import apply_crop, crop_plan_from_report, segment_volume
from .volume_io import ManifestEntry, Volume, load_volume, write_volume


@dataclass
class Outcome:
    scan_id: str
    value: Any = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _guard(fn, entry: ManifestEntry) -> Outcome:
    try:
        return Outcome(entry.scan_id, fn(entry))
    except Exception as exc:  # noqa: BLE001 - one bad scan must not stop the batch
        return Outcome(entry.scan_id, error=f"{type(exc).__name__}: {exc}")


def run_batch(fn: Callable[[ManifestEntry], Any], entries: Sequence[ManifestEntry],
              workers: int = 1) -> list[Outcome]:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    guarded = partial(_guard, fn)
    if workers == 1 or len(entries) <= 1:
        return [guarded(e) for e in entries]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, entries))


def write_errors(outcomes: Sequence[Outcome], path, stage: str) -> int:
    failed = [o for o in outcomes if not o.ok]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "stage", "reason"])
        for o in failed:
            w.writerow([o.scan_id, stage, o.error])
    return len(failed)


def scan_seed(seed: int, scan_id: str, view: int = 0) -> int:
    """Per-scan seed that depends only on the scan's identity."""
    ss = np.random.SeedSequence([seed, zlib.crc32(scan_id.encode()), view])
    return int(ss.generate_state(1, np.uint64)[0])


def ingest_job(entry: ManifestEntry, out_dir: str) -> str:
    v = load_volume(entry.path, entry.scan_id)
    dest = Path(out_dir) / entry.scan_id
    write_volume(v, dest)
    return str(dest)


def segment_job(entry: ManifestEntry, out_dir: str, **detect_kw) -> dict:
    v = load_volume(entry.path, entry.scan_id)
    result = segment_volume(v, **detect_kw)
    (Path(out_dir) / f"{entry.scan_id}.json").write_text(result.to_json())
    return result.report()


def crop_job(entry: ManifestEntry, reports_dir: str, mode: str, out_dir: str) -> str:
    report = json.loads((Path(reports_dir) / f"{entry.scan_id}.json").read_text())
    v = load_volume(entry.path, entry.scan_id)
    cropped = apply_crop(v, crop_plan_from_report(report).for_mode(mode))
    dest = Path(out_dir) / entry.scan_id
    write_volume(cropped, dest)
    return str(dest)


def resample_job(entry: ManifestEntry, size, out_dir: str) -> str:
    v = resample_trilinear(load_volume(entry.path, entry.scan_id), size)
    dest = Path(out_dir) / entry.scan_id
    write_volume(v, dest)
    return str(dest)


def augment_views(v: Volume, seed: Optional[int]) -> list[Volume]:
    """Original and mirrored view, each jittered when ``seed`` is given."""
    views = expand_training_views(v)
    if seed is None:
        return views
    return [apply_jitter(view, draw_jitter(scan_seed(seed, v.scan_id, i))) for i, view in enumerate(views)]


def augment_job(entry: ManifestEntry, seed: Optional[int], out_dir: str) -> list[str]:
    v = load_volume(entry.path, entry.scan_id)
    paths = []
    for i, view in enumerate(augment_views(v, seed)):
        dest = Path(out_dir) / f"{entry.scan_id}__view{i}"
        write_volume(Volume(f"{entry.scan_id}__view{i}", view.data), dest)
        paths.append(str(dest))
    return paths


def features_job(entry: ManifestEntry) -> list[float]:
    return extract_features(load_volume(entry.path, entry.scan_id)).tolist()


def preprocess_job(entry: ManifestEntry, mode: str, size, seg_dir: Optional[str],
                   jitter_seed: Optional[int], keep_dir: Optional[str] = None) -> dict:
    """Full per-scan chain for the pipeline: segment, crop, resample, featurize."""
    v = load_volume(entry.path, entry.scan_id)
    result = segment_volume(v)
    if seg_dir is not None:
        (Path(seg_dir) / f"{entry.scan_id}.json").write_text(result.to_json())
    v = resample_trilinear(apply_crop(v, result.plan.for_mode(mode)), size)
    if keep_dir is not None:
        write_volume(v, Path(keep_dir) / entry.scan_id)
    return {
        "report": result.report(),
        "eval": extract_features(v).tolist(),
        "train": [extract_features(view).tolist() for view in augment_views(v, jitter_seed)],
    }
