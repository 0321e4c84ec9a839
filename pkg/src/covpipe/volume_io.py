"""Volume container, slice-stack ingestion and the RVOL on-disk format."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

COVID = "COVID"
NON_COVID = "NON_COVID"
LABELS = (COVID, NON_COVID)

MANIFEST_HEADER = ["scan_id", "path", "label"]

_INDEX_RE = re.compile(r"\d+")


class VolumeError(ValueError):
    """Malformed volume data or container."""


class ManifestError(ValueError):
    pass


@dataclass
class Volume:
    """A scalar field of normalized intensities.

    ``data`` has shape ``(nz, ny, nx)``: slices outermost, then rows, then
    columns, which is the slice-major layout used on disk.
    """

    scan_id: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"{self.scan_id}: expected a non-empty 3D array, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        lo, hi = float(data.min()), float(data.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise VolumeError(f"{self.scan_id}: voxel values must lie in [0, 1], found [{lo}, {hi}]")
        self.data = data

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.nx, self.ny, self.nz


@dataclass(frozen=True)
class ManifestEntry:
    scan_id: str
    path: str
    label: Optional[str] = None
    origin: str = "labeled"


@dataclass
class ScanManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.scan_id in seen:
                raise ManifestError(f"duplicate scan_id {e.scan_id!r}")
            if e.label is not None and e.label not in LABELS:
                raise ManifestError(f"unknown label {e.label!r} for scan {e.scan_id!r}")
            seen.add(e.scan_id)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.scan_id for e in self.entries]

    def labeled(self) -> "ScanManifest":
        return ScanManifest([e for e in self.entries if e.label is not None])

    def unlabeled(self) -> "ScanManifest":
        return ScanManifest([e for e in self.entries if e.label is None])

    def labels(self) -> dict[str, str]:
        return {e.scan_id: e.label for e in self.entries if e.label is not None}


def _slice_index(path: Path) -> int:
    m = _INDEX_RE.search(path.stem)
    if m is None:
        raise VolumeError(f"cannot parse a slice index from filename: {path}")
    return int(m.group())


def load_slice_stack(dir_path, scan_id: Optional[str] = None) -> Volume:
    """Read a directory of 8-bit grayscale slices into a volume.

    Slices are ordered by the first run of digits in each filename, so
    ``2.png`` precedes ``10.png``. Intensities are scaled by 1/255.
    """
    root = Path(dir_path)
    files = [p for p in root.iterdir() if p.is_file() and not p.name.startswith(".")]
    if not files:
        raise VolumeError(f"no slice images in directory: {root}")
    indexed = sorted(((_slice_index(p), p.name, p) for p in files))
    for (a, _, pa), (b, _, pb) in zip(indexed, indexed[1:]):
        if a == b:
            raise VolumeError(f"duplicate slice index {a}: {pa} and {pb}")

    slices = []
    shape = None
    for _, _, p in indexed:
        with Image.open(p) as img:
            if img.mode != "L":
                raise VolumeError(f"slice is not 8-bit grayscale (mode {img.mode}): {p}")
            arr = np.asarray(img, dtype=np.uint8)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise VolumeError(
                f"mixed slice dimensions: {p} is {arr.shape[1]}x{arr.shape[0]}, "
                f"expected {shape[1]}x{shape[0]}"
            )
        slices.append(arr)
    data = np.stack(slices).astype(np.float32) / np.float32(255.0)
    return Volume(scan_id if scan_id is not None else root.name, data)


def _pair(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def write_volume(v: Volume, path) -> None:
    """Write ``<path>.json`` and ``<path>.raw``."""
    meta_path, raw_path = _pair(path)
    meta = {
        "scan_id": v.scan_id,
        "nx": v.nx,
        "ny": v.ny,
        "nz": v.nz,
        "dtype": "f32le",
        "layout": "zyx",
    }
    raw_path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")


def read_volume(path) -> Volume:
    meta_path, raw_path = _pair(path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"malformed header {meta_path}: {exc}") from None
    try:
        scan_id = str(meta["scan_id"])
        nx, ny, nz = (int(meta[k]) for k in ("nx", "ny", "nz"))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed header {meta_path}: {exc!r}") from None
    if meta.get("dtype") != "f32le" or meta.get("layout") != "zyx":
        raise VolumeError(f"unsupported dtype/layout in {meta_path}")
    if min(nx, ny, nz) < 1:
        raise VolumeError(f"non-positive dimensions in {meta_path}")

    payload = raw_path.read_bytes()
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise VolumeError(
            f"payload length mismatch in {raw_path}: {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(nz, ny, nx)
    if not np.all((data >= 0.0) & (data <= 1.0)):
        raise VolumeError(f"voxel values outside [0, 1] in {raw_path}")
    return Volume(scan_id, data)


def load_volume(path, scan_id: Optional[str] = None) -> Volume:
    """Load either an RVOL container or a slice-image directory."""
    p = Path(path)
    if p.is_dir():
        return load_slice_stack(p, scan_id)
    v = read_volume(p)
    if scan_id is not None and v.scan_id != scan_id:
        v = Volume(scan_id, v.data)
    return v


def load_manifest(path) -> ScanManifest:
    """Parse a manifest CSV; relative scan paths resolve against its directory."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        # an optional trailing ``origin`` column marks fine-tune manifests
        if header not in (MANIFEST_HEADER, MANIFEST_HEADER + ["origin"]):
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        entries = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            scan_id, scan_path, label = row[0], row[1], row[2]
            if scan_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate scan_id {scan_id!r}")
            if label and label not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            seen.add(scan_id)
            origin = row[3] if len(row) == 4 else "labeled"
            if scan_path and not Path(scan_path).is_absolute():
                scan_path = str(Path(path).parent / scan_path)
            entries.append(ManifestEntry(scan_id, scan_path, label or None, origin))
    return ScanManifest(entries)


def write_manifest(manifest: ScanManifest, path, with_origin: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER + (["origin"] if with_origin else []))
        for e in manifest:
            row = [e.scan_id, e.path, e.label or ""]
            if with_origin:
                row.append(e.origin)
            w.writerow(row)


def load_labels(path) -> dict[str, str]:
    """Read ``scan_id -> label`` from any CSV carrying those two columns."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"scan_id", "label"} <= set(reader.fieldnames):
            raise ManifestError(f"{path}: needs scan_id and label columns")
        for row in reader:
            label = row["label"]
            if not label:
                continue
            if label not in LABELS:
                raise ManifestError(f"{path}: unknown label {label!r}")
            out[row["scan_id"]] = label
    return out
