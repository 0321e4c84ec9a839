"""Fixed-size trilinear resampling and training-time augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_volumes
from .volume_io import Volume

CONTRAST_RANGE = (0.8, 1.25)
BRIGHTNESS_RANGE = (-0.1, 0.1)


@dataclass(frozen=True)
class TargetSize:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"target size must be positive, got {self}")


BOTH = TargetSize(256, 256, 176)
SINGLE = TargetSize(320, 160, 224)
PRESETS = {"both": BOTH, "single": SINGLE}


def target_size(size) -> TargetSize:
    if isinstance(size, TargetSize):
        return size
    if isinstance(size, str):
        try:
            return PRESETS[size]
        except KeyError:
            raise ValueError(f"unknown size preset {size!r}; expected one of {sorted(PRESETS)}") from None
    return TargetSize(*size)


def _axis_weights(src: int, dst: int):
    """Source indices and blend weights for center-aligned linear sampling."""
    d = np.arange(dst, dtype=np.float64)
    s = np.clip((d + 0.5) * (src / dst) - 0.5, 0.0, src - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, (s - i0).astype(np.float32)


def _resample_axis(a: np.ndarray, axis: int, dst: int) -> np.ndarray:
    src = a.shape[axis]
    if src == dst:
        return a
    i0, i1, w = _axis_weights(src, dst)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = dst
    # lo + w*(hi - lo) keeps constants exact
    return lo + w.reshape(shape) * (hi - lo)


def resample_trilinear(v: Volume, size) -> Volume:
    """Resample to ``size`` (a preset name, :class:`TargetSize` or ``(nx, ny, nz)``).

    Voxel centers are aligned: output index ``d`` samples source coordinate
    ``(d + 0.5) * src / dst - 0.5``, clamped to the valid range. Linear
    interpolation is applied one axis at a time, which is trilinear overall.
    """
    t = target_size(size)
    out = v.data
    for axis, dst in ((2, t.nx), (1, t.ny), (0, t.nz)):
        out = _resample_axis(out, axis, dst)
    out = np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)
    return Volume(v.scan_id, np.ascontiguousarray(out))


def reflect_sagittal(v: Volume) -> Volume:
    return Volume(v.scan_id, np.ascontiguousarray(v.data[:, :, ::-1]))


@dataclass(frozen=True)
class JitterParams:
    contrast: float = 1.0
    brightness: float = 0.0

    def __post_init__(self):
        if not CONTRAST_RANGE[0] <= self.contrast <= CONTRAST_RANGE[1]:
            raise ValueError(f"contrast {self.contrast} outside {CONTRAST_RANGE}")
        if not BRIGHTNESS_RANGE[0] <= self.brightness <= BRIGHTNESS_RANGE[1]:
            raise ValueError(f"brightness {self.brightness} outside {BRIGHTNESS_RANGE}")


def draw_jitter(seed: int) -> JitterParams:
    """Contrast is log-uniform over its range, brightness uniform."""
    rng = np.random.default_rng(seed)
    log_c = rng.uniform(math.log(CONTRAST_RANGE[0]), math.log(CONTRAST_RANGE[1]))
    contrast = min(max(math.exp(log_c), CONTRAST_RANGE[0]), CONTRAST_RANGE[1])
    return JitterParams(contrast, float(rng.uniform(*BRIGHTNESS_RANGE)))


def apply_jitter(v: Volume, params: JitterParams) -> Volume:
    if params.contrast == 1.0 and params.brightness == 0.0:
        return Volume(v.scan_id, v.data.copy())
    out = (v.data.astype(np.float64) - 0.5) * params.contrast + 0.5 + params.brightness
    return Volume(v.scan_id, np.clip(out, 0.0, 1.0).astype(np.float32))


def jitter_brightness_contrast(v: Volume, seed: int) -> Volume:
    return apply_jitter(v, draw_jitter(seed))


def expand_training_views(v: Volume) -> list[Volume]:
    """The volume itself and its mirror image."""
    return [v, reflect_sagittal(v)]


class VolumeResampler(BaseEstimator, TransformerMixin):
    def __init__(self, size="both"):
        self.size = size

    def fit(self, X, y=None):
        target_size(self.size)
        check_volumes(X)
        return self

    def transform(self, X):
        return [resample_trilinear(v, self.size) for v in check_volumes(X)]
