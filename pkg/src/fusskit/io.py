"""NPY exchange formats and PPM previews.

Arrays on disk are NPY v1.0, little-endian, C-contiguous: images, scores
and features as ``<f4``; segment and label maps as ``<i4`` with UNKNOWN=-1
and IGNORE=-2. In memory everything is float64 / int64.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ._validation import ValidationError

_KINDS = {
    "image": ("<f4", (2, 3)),
    "scores": ("<f4", (2,)),
    "features": ("<f4", (3,)),
    "segments": ("<i4", (2,)),
    "labels": ("<i4", (2,)),
}


def save_array(path, arr, kind: str) -> None:
    dtype, ndims = _KINDS[kind]
    arr = np.asarray(arr)
    if arr.ndim not in ndims:
        raise ValidationError(f"{kind} array must have {ndims} dims, got {arr.shape}")
    if dtype == "<i4" and arr.size and (arr.min() < np.iinfo(np.int32).min
                                        or arr.max() > np.iinfo(np.int32).max):
        raise ValidationError(f"{kind} values overflow int32")
    out = np.ascontiguousarray(arr.astype(dtype))
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, out, version=(1, 0), allow_pickle=False)


def load_array(path, kind: str) -> np.ndarray:
    _, ndims = _KINDS[kind]
    arr = np.load(Path(path), allow_pickle=False)
    if arr.ndim not in ndims:
        raise ValidationError(f"{path}: {kind} array must have {ndims} dims, got {arr.shape}")
    if kind in ("segments", "labels"):
        if arr.dtype.kind not in "iu":
            raise ValidationError(f"{path}: {kind} must be integer, got {arr.dtype}")
        return arr.astype(np.int64)
    if arr.dtype.kind not in "fiu":
        raise ValidationError(f"{path}: {kind} must be numeric, got {arr.dtype}")
    return arr.astype(np.float64)


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"PPM needs (H, W, 3) data, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def segment_colors(seg, seed: int = 0) -> np.ndarray:
    seg = np.asarray(seg)
    palette = np.random.default_rng(seed).integers(0, 256, size=(int(seg.max()) + 1, 3))
    return palette[seg].astype(np.uint8)


def image_preview(img) -> np.ndarray:
    """First three bands stretched to 0..255 (single band is repeated)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    bands = img[..., :3] if img.shape[2] >= 3 else np.repeat(img[..., :1], 3, axis=2)
    lo = bands.min(axis=(0, 1))
    span = bands.max(axis=(0, 1)) - lo
    span[span == 0] = 1.0
    return np.round(255.0 * (bands - lo) / span).astype(np.uint8)


def unknown_overlay(img, unknown_mask, alpha: float = 0.5) -> np.ndarray:
    base = image_preview(img).astype(np.float64)
    red = np.array([255.0, 0.0, 0.0])
    m = np.asarray(unknown_mask, dtype=bool)
    base[m] = (1 - alpha) * base[m] + alpha * red
    return np.round(base).astype(np.uint8)
