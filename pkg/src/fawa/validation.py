"""Input checks shared by the public entry points."""
from __future__ import annotations

import numpy as np


def check_image(x, name: str = "image", height: int | None = None) -> np.ndarray:
    """Return ``x`` as a 2-D float64 array with values in [0, 1]."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is empty: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    if height is not None and arr.shape[0] != height:
        raise ValueError(f"{name} height {arr.shape[0]} does not match model height {height}")
    return arr


def check_mask(mask, shape: tuple[int, ...] | None = None, name: str = "mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must be binary")
        m = m.astype(bool)
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} shape {m.shape} does not match image shape {tuple(shape)}")
    return m


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")
