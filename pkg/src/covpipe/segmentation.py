"""Per-slice lung detection and crop planning.

Each axial slice is thresholded with Otsu's method (dark voxels are
foreground), split into 8-connected components, filtered, and the two
largest components that barely overlap horizontally are taken as the
lungs. Per-slice boxes are unioned over the volume and turned into three
crops: both lungs, left lung only, right lung only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_volumes
from .volume_io import Volume

logger = logging.getLogger(__name__)

N_BINS = 256
MIN_AREA = 500
MAX_WIDTH_FRACTION = 0.95
MAX_OVERLAP = 0.20

_EIGHT = np.ones((3, 3), dtype=bool)


class DegenerateSliceError(ValueError):
    """Slice intensities occupy a single histogram bin."""


class SegmentationFailure(RuntimeError):
    """No lung was detected in any slice."""


@dataclass(frozen=True)
class BoundingBox2D:
    x_min: int
    x_max: int
    y_min: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def as_tuple(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)


@dataclass(frozen=True)
class Box3D:
    """Inclusive voxel range ``[x0, x1] x [y0, y1] x [z0, z1]``."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int

    def as_list(self) -> list[int]:
        return [self.x0, self.x1, self.y0, self.y1, self.z0, self.z1]

    @property
    def shape_xyz(self) -> tuple[int, int, int]:
        return (self.x1 - self.x0 + 1, self.y1 - self.y0 + 1, self.z1 - self.z0 + 1)

    def contains(self, other: "Box3D") -> bool:
        return (
            self.x0 <= other.x0 and other.x1 <= self.x1
            and self.y0 <= other.y0 and other.y1 <= self.y1
            and self.z0 <= other.z0 and other.z1 <= self.z1
        )

    def union(self, other: "Box3D") -> "Box3D":
        return Box3D(
            min(self.x0, other.x0), max(self.x1, other.x1),
            min(self.y0, other.y0), max(self.y1, other.y1),
            min(self.z0, other.z0), max(self.z1, other.z1),
        )

    @classmethod
    def full(cls, dims) -> "Box3D":
        nx, ny, nz = dims
        return cls(0, nx - 1, 0, ny - 1, 0, nz - 1)


@dataclass(frozen=True)
class ComponentStat:
    area: int
    bbox: BoundingBox2D
    centroid_x: float


@dataclass(frozen=True)
class SliceDetection:
    slice_index: int
    left: Optional[ComponentStat] = None
    right: Optional[ComponentStat] = None

    @property
    def empty(self) -> bool:
        return self.left is None and self.right is None


@dataclass(frozen=True)
class LungBoxes3D:
    left_union: Optional[Box3D]
    right_union: Optional[Box3D]
    z_first: int
    z_last: int


@dataclass(frozen=True)
class CropPlan:
    both: Box3D
    left: Box3D
    right: Box3D

    def for_mode(self, mode: str) -> Box3D:
        if mode not in ("both", "left", "right"):
            raise ValueError(f"unknown crop mode {mode!r}")
        return getattr(self, mode)


@dataclass(frozen=True)
class SegmentationResult:
    scan_id: str
    plan: CropPlan
    boxes: Optional[LungBoxes3D]
    slices_detected: int
    fallback: bool

    def report(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "crops": {
                "both": self.plan.both.as_list(),
                "left": self.plan.left.as_list(),
                "right": self.plan.right.as_list(),
            },
            "slices_detected": self.slices_detected,
            "fallback": self.fallback,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2) + "\n"


def crop_plan_from_report(report: dict) -> CropPlan:
    crops = report["crops"]
    return CropPlan(*(Box3D(*crops[k]) for k in ("both", "left", "right")))


def intensity_codes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to 256 uniform bins; 1.0 lands in the last bin."""
    arr = np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    # scaling by a power of two is exact, so truncation equals floor here
    codes = (np.clip(arr, 0.0, 1.0) * N_BINS).astype(np.int32)
    np.minimum(codes, N_BINS - 1, out=codes)
    return codes


def _otsu_bin(codes: np.ndarray) -> int:
    hist = np.bincount(codes.ravel(), minlength=N_BINS).astype(np.int64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateSliceError("slice occupies a single intensity bin")
    n0 = np.cumsum(hist)[:-1]  # class below boundary k = 1..255
    s0 = np.cumsum(hist * np.arange(N_BINS, dtype=np.int64))[:-1]
    total, total_sum = int(n0[-1] + hist[-1]), int(s0[-1] + (N_BINS - 1) * hist[-1])
    n1 = total - n0
    valid = (n0 > 0) & (n1 > 0)
    # between-class variance is proportional to diff^2 / (n0 * n1)
    diff = (total * s0 - n0 * total_sum).astype(np.float64)
    score = np.full(N_BINS - 1, -1.0)
    score[valid] = diff[valid] ** 2 / (n0[valid].astype(np.float64) * n1[valid])

    best = score.max()
    near = np.flatnonzero(score >= best * (1 - 1e-9))
    if len(near) == 1:
        return int(near[0]) + 1
    # float scores too close to call: settle exactly, lowest boundary wins ties
    exact = [
        Fraction(int(total * s0[i] - n0[i] * total_sum) ** 2, int(n0[i]) * int(n1[i]))
        for i in near
    ]
    top = max(exact)
    return int(near[exact.index(top)]) + 1


def otsu_threshold(slice_: np.ndarray) -> float:
    """Otsu threshold of a 2D slice over 256 uniform bins on [0, 1].

    Returns the bin boundary ``k / 256``; foreground is ``value < threshold``.
    Raises :class:`DegenerateSliceError` when only one bin is occupied.
    """
    arr = np.asarray(slice_)
    if arr.size == 0:
        raise ValueError("empty slice")
    return _otsu_bin(intensity_codes(arr)) / N_BINS


def _components(mask: np.ndarray, min_area: int) -> list[ComponentStat]:
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    out = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = sl
        if (ys.stop - ys.start) * (xs.stop - xs.start) < min_area:
            continue  # filled area can never exceed the box area
        filled = ndimage.binary_fill_holes(labels[sl] == i)
        area = int(np.count_nonzero(filled))
        if area < min_area:
            continue
        cx = float(np.nonzero(filled)[1].mean()) + xs.start
        box = BoundingBox2D(xs.start, xs.stop - 1, ys.start, ys.stop - 1)
        out.append(ComponentStat(area, box, cx))
    return out


def horizontal_overlap(a: BoundingBox2D, b: BoundingBox2D) -> int:
    return max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1)


def pair_ok(a: BoundingBox2D, b: BoundingBox2D, max_overlap=MAX_OVERLAP) -> bool:
    """Overlap must stay below ``max_overlap`` of the narrower box width."""
    limit = Fraction(str(max_overlap)) * min(a.width, b.width)
    return horizontal_overlap(a, b) < limit


def detect_slice_lungs(
    slice_: np.ndarray,
    slice_index: int,
    min_area: int = MIN_AREA,
    max_width_fraction: float = MAX_WIDTH_FRACTION,
    max_overlap: float = MAX_OVERLAP,
) -> SliceDetection:
    arr = np.asarray(slice_)
    codes = intensity_codes(arr)
    try:
        k = _otsu_bin(codes)
    except DegenerateSliceError:
        return SliceDetection(slice_index)
    nx = arr.shape[1]

    comps = [
        c for c in _components(codes < k, min_area)
        if c.bbox.width < max_width_fraction * nx
    ]
    if not comps:
        return SliceDetection(slice_index)

    pairs = []
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            a, b = comps[i], comps[j]
            if pair_ok(a.bbox, b.bbox, max_overlap):
                key = (-(a.area + b.area), min(a.bbox.x_min, b.bbox.x_min),
                       sorted([a.bbox.as_tuple(), b.bbox.as_tuple()]))
                pairs.append((key, a, b))
    if pairs:
        _, a, b = min(pairs, key=lambda t: t[0])
        if (b.centroid_x, b.bbox.x_min) < (a.centroid_x, a.bbox.x_min):
            a, b = b, a
        return SliceDetection(slice_index, left=a, right=b)

    best = min(comps, key=lambda c: (-c.area, c.bbox.as_tuple()))
    if best.centroid_x <= (nx - 1) / 2:
        return SliceDetection(slice_index, left=best)
    return SliceDetection(slice_index, right=best)


def _extend(box: Optional[Box3D], stat: Optional[ComponentStat], z: int) -> Optional[Box3D]:
    if stat is None:
        return box
    b = stat.bbox
    new = Box3D(b.x_min, b.x_max, b.y_min, b.y_max, z, z)
    return new if box is None else box.union(new)


def aggregate_volume(detections: Sequence[SliceDetection]) -> LungBoxes3D:
    """Union per-slice lung boxes over the volume."""
    left = right = None
    zs = []
    for d in sorted(detections, key=lambda d: d.slice_index):
        if d.empty:
            continue
        left = _extend(left, d.left, d.slice_index)
        right = _extend(right, d.right, d.slice_index)
        zs.append(d.slice_index)
    if not zs:
        raise SegmentationFailure("no lungs detected in any slice")
    return LungBoxes3D(left, right, zs[0], zs[-1])


def plan_crops(boxes: LungBoxes3D, dims) -> CropPlan:
    """Derive the both/left/right crops from aggregated lung boxes.

    The left crop runs from column 0 to the first column of the right lung;
    the right crop from the last column of the left lung to the edge.
    """
    nx = dims[0]
    lu, ru = boxes.left_union, boxes.right_union
    present = [b for b in (lu, ru) if b is not None]
    if not present:
        raise SegmentationFailure("no lung boxes to plan crops from")
    u = present[0] if len(present) == 1 else present[0].union(present[1])
    both = Box3D(u.x0, u.x1, u.y0, u.y1, boxes.z_first, boxes.z_last)
    if lu is None or ru is None or lu == ru:
        return CropPlan(both, both, both)
    left = Box3D(0, ru.x0, both.y0, both.y1, both.z0, both.z1)
    right = Box3D(lu.x1, nx - 1, both.y0, both.y1, both.z0, both.z1)
    return CropPlan(both, left, right)


def apply_crop(v: Volume, box: Box3D) -> Volume:
    nx, ny, nz = v.dims
    if not (0 <= box.x0 <= box.x1 < nx and 0 <= box.y0 <= box.y1 < ny and 0 <= box.z0 <= box.z1 < nz):
        raise ValueError(f"crop {box.as_list()} outside volume of dims {(nx, ny, nz)}")
    sub = v.data[box.z0:box.z1 + 1, box.y0:box.y1 + 1, box.x0:box.x1 + 1]
    return Volume(v.scan_id, np.ascontiguousarray(sub))


def segment_volume(v: Volume, **detect_kw) -> SegmentationResult:
    """Detect lungs slice by slice and plan crops.

    When nothing is detected the plan covers the full volume and
    ``fallback`` is set, so batch runs keep going.
    """
    detections = [detect_slice_lungs(v.data[z], z, **detect_kw) for z in range(v.nz)]
    n_detected = sum(not d.empty for d in detections)
    try:
        boxes = aggregate_volume(detections)
    except SegmentationFailure:
        logger.warning("%s: no lungs detected, falling back to the full volume", v.scan_id)
        full = Box3D.full(v.dims)
        return SegmentationResult(v.scan_id, CropPlan(full, full, full), None, 0, True)
    return SegmentationResult(v.scan_id, plan_crops(boxes, v.dims), boxes, n_detected, False)


class LungCropper(BaseEstimator, TransformerMixin):
    """Crop each volume to its lungs.

    Stateless: ``fit`` only validates. ``mode`` selects the both-lungs crop
    or one of the single-lung crops.
    """

    def __init__(self, mode="both", min_area=MIN_AREA,
                 max_width_fraction=MAX_WIDTH_FRACTION, max_overlap=MAX_OVERLAP):
        self.mode = mode
        self.min_area = min_area
        self.max_width_fraction = max_width_fraction
        self.max_overlap = max_overlap

    def fit(self, X, y=None):
        if self.mode not in ("both", "left", "right"):
            raise ValueError(f"mode must be both, left or right, got {self.mode!r}")
        check_volumes(X)
        return self

    def segment(self, X) -> list[SegmentationResult]:
        kw = dict(min_area=self.min_area, max_width_fraction=self.max_width_fraction,
                  max_overlap=self.max_overlap)
        return [segment_volume(v, **kw) for v in check_volumes(X)]

    def transform(self, X):
        X = check_volumes(X)
        return [apply_crop(v, r.plan.for_mode(self.mode)) for v, r in zip(X, self.segment(X))]
