"""Input validation helpers shared by every estimator and function.

All raster-shaped inputs are converted to canonical dtypes here so the
numerical kernels can assume contiguous float64 / int64 arrays.
"""
from __future__ import annotations

import math
import numbers

import numpy as np

UNKNOWN = -1
IGNORE = -2
SENTINELS = (UNKNOWN, IGNORE)


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def check_image(img, name: str = "img") -> np.ndarray:
    """Return ``img`` as a C-contiguous float64 ``(H, W, B)`` array.

    2-D input is treated as a single band.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be (H, W) or (H, W, B), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty axis: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
        raise ValidationError(f"{name} must be real-valued, got {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


def check_label_field(labels, name: str = "labels", nonnegative: bool = False) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty axis: {arr.shape}")
    if arr.dtype.kind not in "iub":
        if arr.dtype.kind == "f" and np.all(np.isfinite(arr)) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise ValidationError(f"{name} must hold integers, got {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    if nonnegative and arr.size and arr.min() < 0:
        raise ValidationError(f"{name} must be nonnegative")
    return arr


def check_segment_map(seg, name: str = "seg") -> np.ndarray:
    """Validate the compact-label invariant of a segment map (not contiguity)."""
    arr = check_label_field(seg, name, nonnegative=True)
    k = int(arr.max()) + 1
    counts = np.bincount(arr.ravel(), minlength=k)
    if np.any(counts == 0):
        raise ValidationError(f"{name} labels are not compact (missing ids in 0..{k - 1})")
    return arr


def check_score_map(scores, name: str = "scores", allow_sentinel: bool = True) -> np.ndarray:
    arr = np.asarray(scores)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise ValidationError(f"{name} contains NaN or +Inf")
    if not allow_sentinel and np.isneginf(arr).any():
        raise ValidationError(f"{name} contains -Inf")
    return arr


def check_features(features, name: str = "features") -> np.ndarray:
    """Return a float64 ``(N, D)`` sample matrix; ``(H, W, D)`` maps are flattened."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    elif arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[2])
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be (N, D) or (H, W, D), got shape {np.shape(features)}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_same_shape(*arrays, names=None) -> None:
    shapes = [np.shape(a)[:2] for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValidationError(f"shape mismatch between {label}: {shapes}")


def check_real(value, name: str, low: float | None = None, high: float | None = None,
               low_inclusive: bool = True, high_inclusive: bool = True) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValidationError(f"{name} must be a real number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    if low is not None and (v < low or (v == low and not low_inclusive)):
        raise ValidationError(f"{name}={v} is below the allowed range")
    if high is not None and (v > high or (v == high and not high_inclusive)):
        raise ValidationError(f"{name}={v} is above the allowed range")
    return v


def check_int(value, name: str, low: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    v = int(value)
    if low is not None and v < low:
        raise ValidationError(f"{name}={v} must be >= {low}")
    return v


def check_stat(stat: str) -> str:
    if stat not in ("mean", "median"):
        raise ValidationError(f"stat must be 'mean' or 'median', got {stat!r}")
    return stat
