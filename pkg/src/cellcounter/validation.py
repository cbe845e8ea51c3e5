"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

__all__ = ["check_image_stack", "check_counts", "as_unit_float"]


def as_unit_float(img: np.ndarray) -> np.ndarray:
    """uint8 images map to [0, 1]; float images pass through unchanged."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64, copy=False)


def check_image_stack(X, name: str = "X") -> np.ndarray:
    """Coerce a list of 2-d images or a 3-d array to a float (N, H, W) stack."""
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError(f"{name} is empty")
        shapes = {np.asarray(a).shape for a in X}
        if len(shapes) != 1:
            raise ValueError(f"{name} mixes image shapes: {sorted(shapes)}")
        X = np.stack([np.asarray(a) for a in X])
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n_samples, height, width), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    out = as_unit_float(arr)
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains non-finite values")
    return out


def check_counts(y, n_samples: int, name: str = "y") -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if arr.shape[0] != n_samples:
        raise ValueError(f"{name} has {arr.shape[0]} entries for {n_samples} samples")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if (arr < 0).any():
        raise ValueError(f"{name} contains negative counts")
    return arr
