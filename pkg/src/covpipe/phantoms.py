"""Synthetic CT-like phantoms: two dark lungs in a bright body.

Lungs are ellipsoids with their apex and base cut flat at 80% of the z
radius, so every lung slice has a sizeable cross-section. Positive
phantoms carry bright spherical lesions inside the lungs.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .segmentation import Box3D
from .volume_io import COVID, LABELS, NON_COVID, ManifestEntry, ScanManifest, Volume, write_manifest, write_volume

BODY = 0.8
LUNG = 0.1
LESION = 0.6
Z_CAP = 0.8

TRUTH_HEADER = ["scan_id", "label", "lx0", "lx1", "ly0", "ly1", "lz0", "lz1",
                "rx0", "rx1", "ry0", "ry1", "rz0", "rz1"]


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]  # (x, y, z) in voxel units
    radii: tuple[float, float, float]

    def x_extent(self):
        return self.center[0] - self.radii[0], self.center[0] + self.radii[0]


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    nx: int
    ny: int
    nz: int
    left_ellipsoid: Ellipsoid
    right_ellipsoid: Ellipsoid
    lesion_count: int = 0
    label: str = NON_COVID
    noise_sigma: float = 0.0

    def validate(self):
        dims = (self.nx, self.ny, self.nz)
        if min(dims) < 1:
            raise PhantomSpecError(f"dimensions must be positive, got {dims}")
        for name, e in (("left", self.left_ellipsoid), ("right", self.right_ellipsoid)):
            for c, r, n in zip(e.center, e.radii, dims):
                if r <= 0:
                    raise PhantomSpecError(f"{name} ellipsoid radii must be positive")
                if not (c - r > 0 and c + r < n - 1):
                    raise PhantomSpecError(f"{name} ellipsoid does not fit strictly inside {dims}")
        (a0, a1), (b0, b1) = self.left_ellipsoid.x_extent(), self.right_ellipsoid.x_extent()
        overlap = max(0.0, min(a1, b1) - max(a0, b0))
        if overlap >= 0.2 * min(a1 - a0, b1 - b0):
            raise PhantomSpecError("ellipsoids overlap horizontally by 20% or more")
        if self.left_ellipsoid.center[0] >= self.right_ellipsoid.center[0]:
            raise PhantomSpecError("left ellipsoid must lie at smaller x than the right one")
        if self.lesion_count < 0:
            raise PhantomSpecError("lesion_count must be non-negative")
        if self.label not in LABELS or (self.label == COVID) != (self.lesion_count >= 1):
            raise PhantomSpecError("label must be COVID exactly when lesion_count >= 1")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class PhantomTruth:
    left_box: Box3D
    right_box: Box3D
    label: str


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def _lung_mask(e: Ellipsoid, dims) -> tuple[tuple[slice, slice, slice], np.ndarray]:
    """Voxel mask of a z-capped ellipsoid, restricted to its bounding block."""
    nx, ny, nz = dims
    (cx, cy, cz), (rx, ry, rz) = e.center, e.radii
    lo = [max(0, math.floor(c - r)) for c, r in ((cx, rx), (cy, ry), (cz, rz))]
    hi = [min(n, math.ceil(c + r) + 1) for c, r, n in ((cx, rx, nx), (cy, ry, ny), (cz, rz, nz))]
    z = np.arange(lo[2], hi[2])[:, None, None]
    y = np.arange(lo[1], hi[1])[None, :, None]
    x = np.arange(lo[0], hi[0])[None, None, :]
    inside = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
    inside &= np.abs(z - cz) <= Z_CAP * rz
    block = (slice(lo[2], hi[2]), slice(lo[1], hi[1]), slice(lo[0], hi[0]))
    return block, inside


def _tight_box(block, mask) -> Box3D:
    zs, ys, xs = (np.flatnonzero(mask.any(axis=axes)) for axes in ((1, 2), (0, 2), (0, 1)))
    return Box3D(
        block[2].start + int(xs[0]), block[2].start + int(xs[-1]),
        block[1].start + int(ys[0]), block[1].start + int(ys[-1]),
        block[0].start + int(zs[0]), block[0].start + int(zs[-1]),
    )


def generate_phantom(spec: PhantomSpec, scan_id: str = "phantom") -> tuple[Volume, PhantomTruth]:
    spec.validate()
    dims = (spec.nx, spec.ny, spec.nz)
    rng = _rng(spec.seed)
    data = np.full((spec.nz, spec.ny, spec.nx), BODY, dtype=np.float32)

    lungs = [_lung_mask(e, dims) for e in (spec.left_ellipsoid, spec.right_ellipsoid)]
    for block, mask in lungs:
        data[block][mask] = LUNG

    ellipsoids = (spec.left_ellipsoid, spec.right_ellipsoid)
    for _ in range(spec.lesion_count):
        side = int(rng.integers(2))
        e = ellipsoids[side]
        block, mask = lungs[side]
        radius = float(rng.uniform(0.45, 0.60)) * min(e.radii)
        # offset + radius stays below the flat cap, so the blob never reaches the lung edge
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * float(rng.uniform(0.0, 0.25))
        centre = [c + o * r for c, o, r in zip(e.center, offset, e.radii)]
        z = np.arange(block[0].start, block[0].stop)[:, None, None]
        y = np.arange(block[1].start, block[1].stop)[None, :, None]
        x = np.arange(block[2].start, block[2].stop)[None, None, :]
        blob = (x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2 <= radius ** 2
        data[block][blob & mask] = LESION

    if spec.noise_sigma > 0:
        data += rng.normal(0.0, spec.noise_sigma, size=data.shape).astype(np.float32)
        np.clip(data, 0.0, 1.0, out=data)

    truth = PhantomTruth(_tight_box(*lungs[0]), _tight_box(*lungs[1]), spec.label)
    return Volume(scan_id, data), truth


def random_spec(seed: int, index: int, label: str, dims=(128, 128, 128),
                noise_sigma: float = 0.02, lesions: tuple[int, int] = (2, 4)) -> PhantomSpec:
    """Draw a valid spec from the stream keyed by ``(seed, index)``.

    Geometry scales with ``dims``; at 128 voxels per side every lung slice,
    caps included, exceeds 500 voxels of area.
    """
    nx, ny, nz = dims
    rng = _rng(seed, index)
    u = rng.uniform

    def lung(cx_range):
        centre = (u(*cx_range) * nx, u(0.46, 0.54) * ny, u(0.45, 0.55) * nz)
        radii = (u(0.15, 0.19) * nx, u(0.25, 0.32) * ny, u(0.25, 0.35) * nz)
        return Ellipsoid(centre, radii)

    left, right = lung((0.28, 0.30)), lung((0.70, 0.72))
    count = int(rng.integers(lesions[0], lesions[1] + 1)) if label == COVID else 0
    return PhantomSpec(
        seed=int(rng.integers(2**63)), nx=nx, ny=ny, nz=nz,
        left_ellipsoid=left, right_ellipsoid=right,
        lesion_count=count, label=label, noise_sigma=noise_sigma,
    )


def positive_indices(n: int, positive_fraction: float) -> list[bool]:
    """Spread ``round(n * positive_fraction)`` positives evenly over ``n`` slots."""
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must lie in [0, 1]")
    cum = [math.floor(i * positive_fraction + 0.5) for i in range(n + 1)]
    return [cum[i + 1] > cum[i] for i in range(n)]


def _write_one(args):
    seed, index, label, dims, noise_sigma, vol_dir = args
    scan_id = f"phantom_{index:04d}"
    spec = random_spec(seed, index, label, dims, noise_sigma)
    vol, truth = generate_phantom(spec, scan_id)
    write_volume(vol, Path(vol_dir) / scan_id)
    return scan_id, truth


def generate_dataset(n: int, seed: int, positive_fraction: float, out_dir,
                     unlabeled: int = 0, dims=(128, 128, 128), noise_sigma: float = 0.02,
                     workers: int = 1) -> ScanManifest:
    """Write ``n`` phantoms plus ``manifest.csv`` and ``truth.csv`` to ``out_dir``.

    The last ``unlabeled`` scans are listed without a label in the manifest;
    ``truth.csv`` always carries every label and both lung boxes.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 <= unlabeled <= n:
        raise ValueError("unlabeled must lie in [0, n]")
    out = Path(out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    labels = [COVID if p else NON_COVID for p in positive_indices(n, positive_fraction)]
    jobs = [(seed, i, labels[i], tuple(dims), noise_sigma, str(vol_dir)) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_write_one, jobs))
    else:
        results = [_write_one(j) for j in jobs]

    entries = []
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for i, (scan_id, truth) in enumerate(results):
            w.writerow([scan_id, truth.label] + truth.left_box.as_list() + truth.right_box.as_list())
            label = None if i >= n - unlabeled else truth.label
            entries.append(ManifestEntry(scan_id, f"volumes/{scan_id}", label))
    manifest = ScanManifest(entries)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


def load_truth(path) -> dict[str, PhantomTruth]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = [int(row[k]) for k in TRUTH_HEADER[2:]]
            out[row["scan_id"]] = PhantomTruth(Box3D(*vals[:6]), Box3D(*vals[6:]), row["label"])
    return out
