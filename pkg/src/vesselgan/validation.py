"""Input checks shared by the estimator and the evaluation helpers."""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError


def check_patches(X, size=None, name="X") -> np.ndarray:
    """Return ``X`` as a float32 (N, S, S) array; accepts (N, S, S, 1) and (N, 1, S, S)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    elif X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ShapeError(f"{name} must be a stack of square single-channel patches, got shape {X.shape}")
    if size is not None and X.shape[1] != size:
        raise ShapeError(f"{name} patches are {X.shape[1]}x{X.shape[2]}, expected {size}x{size}")
    if not np.all(np.isfinite(X)):
        raise ShapeError(f"{name} contains non-finite values")
    return X


def check_patch_labels(y, X: np.ndarray, structured: bool, name="y") -> np.ndarray:
    """Per-pixel (N, S, S) labels, or per-patch (N,) labels for the center-pixel head."""
    y = np.asarray(y)
    if y.shape[:1] != X.shape[:1]:
        raise ShapeError(f"{name} holds {y.shape[0] if y.ndim else 0} entries for {len(X)} patches")
    if structured and y.shape != X.shape:
        raise ShapeError(f"structured head needs per-pixel labels shaped {X.shape}, got {y.shape}")
    if not structured:
        if y.ndim == 3:
            y = y[:, y.shape[1] // 2, y.shape[2] // 2]
        elif y.ndim != 1:
            raise ShapeError(f"center-pixel labels must be (N,) or (N, S, S), got {y.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ShapeError(f"{name} must be binary (vessel = 1)")
    return y.astype(np.int64)
