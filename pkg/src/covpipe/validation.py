"""Input validation helpers shared by the estimators and table operations."""

from __future__ import annotations

import math

from .volume_io import Volume


def check_volume(v) -> Volume:
    if not isinstance(v, Volume):
        raise TypeError(f"expected a Volume, got {type(v).__name__}")
    return v


def check_volumes(X) -> list[Volume]:
    if isinstance(X, Volume):
        raise TypeError("expected a sequence of volumes, got a single Volume")
    return [check_volume(v) for v in X]


def check_probability(p, name="probability") -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_threshold(threshold) -> float:
    """Confidence thresholds live in (0.5, 1]."""
    t = float(threshold)
    if not (0.5 < t <= 1.0):
        raise ValueError(f"confidence threshold must lie in (0.5, 1], got {t}")
    return t
