"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .handsim import N_JOINTS


def check_images(x, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Return ``x`` as a float64 (N, 3, H, W) array with values in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"images must be (N, 3, H, W), got shape {x.shape}")
    if len(x) == 0:
        raise ValueError("no images given")
    if image_size is not None and x.shape[2:] != tuple(image_size):
        raise ValueError(f"images are {x.shape[2]}x{x.shape[3]}, model expects {image_size[0]}x{image_size[1]}")
    if not np.isfinite(x).all():
        raise ValueError("images contain NaN or inf")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


def check_joints(y, n: int | None = None, image_size=(64, 64), d: int = 8) -> np.ndarray:
    """Return ``y`` as (N, 21, 3) 2.5D joints inside the image/depth box."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2 and y.shape[1] == N_JOINTS * 3:
        y = y.reshape(-1, N_JOINTS, 3)
    if y.ndim != 3 or y.shape[1:] != (N_JOINTS, 3):
        raise ValueError(f"joints must be (N, {N_JOINTS}, 3), got shape {y.shape}")
    if n is not None and len(y) != n:
        raise ValueError(f"{len(y)} joint sets for {n} images")
    if not np.isfinite(y).all():
        raise ValueError("joints contain NaN or inf")
    h, w = image_size
    lo, hi = np.array([-0.5, -0.5, 0.0]), np.array([w - 0.5, h - 0.5, float(d)])
    if (y < lo).any() or (y > hi).any():
        raise ValueError("joints fall outside the image / depth range")
    return y


def check_xy(x, y, image_size=(64, 64), d: int = 8) -> tuple[np.ndarray, np.ndarray]:
    x = check_images(x, image_size)
    return x, check_joints(y, len(x), image_size, d)
