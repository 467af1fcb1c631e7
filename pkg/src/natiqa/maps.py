"""Small grid utilities shared by saliency construction, losses and metrics."""

from __future__ import annotations

import numpy as np


def normalize_max_one(values: np.ndarray) -> np.ndarray:
    """Scale a non-negative map so its maximum is 1. All-zero maps pass through."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak <= 0.0:
        return values.copy()
    return values / peak


def normalize_unit_sum(values: np.ndarray) -> np.ndarray:
    """Scale a non-negative map so its entries sum to 1. All-zero maps pass through."""
    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    if total <= 0.0:
        return values.copy()
    return values / total


def gaussian_splat(points_xy: np.ndarray, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Sum isotropic Gaussians centered at (x, y) points onto an H x W grid.

    values(i, j) = sum_f exp(-((i - y_f)^2 + (j - x_f)^2) / (2 sigma^2))
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = shape
    grid = np.zeros((h, w), dtype=np.float64)
    points = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    if points.size == 0:
        return grid
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in points:
        grid += np.exp(-((rows - y) ** 2 + (cols - x) ** 2) * inv)
    return grid


def pool_to(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Average-pool a 2-D map down to `shape` (adaptive bins, PyTorch convention)."""
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape
    out_h, out_w = shape
    if out_h > in_h or out_w > in_w:
        raise ValueError(f"cannot pool {values.shape} down to {shape}")
    if (in_h, in_w) == (out_h, out_w):
        return values.copy()
    out = np.empty((out_h, out_w), dtype=np.float64)
    row_edges = [(i * in_h // out_h, -(-(i + 1) * in_h // out_h)) for i in range(out_h)]
    col_edges = [(j * in_w // out_w, -(-(j + 1) * in_w // out_w)) for j in range(out_w)]
    for i, (r0, r1) in enumerate(row_edges):
        for j, (c0, c1) in enumerate(col_edges):
            out[i, j] = values[r0:r1, c0:c1].mean()
    return out


def upsample_bilinear(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a 2-D map to `shape` using half-pixel-centered sampling."""
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape
    out_h, out_w = shape
    if (in_h, in_w) == (out_h, out_w):
        return values.copy()
    # Half-pixel centers clamped to the source extent.
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = values[y0][:, x0] * (1 - wx) + values[y0][:, x1] * wx
    bot = values[y1][:, x0] * (1 - wx) + values[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy
