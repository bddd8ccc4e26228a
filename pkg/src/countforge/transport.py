"""Transport cost between density-grid cells and annotation points.

Grid cells and points are first mapped into a shared unit-square frame by
dividing through ``D = max(height, width)``; the cost of moving mass from
cell ``x_i`` to point ``y_j`` is then ``exp(||x_i - y_j|| / eta)``.  With
normalized coordinates every entry lies in ``[1, exp(sqrt(2)/eta)]``.
"""

from __future__ import annotations

import numpy as np

from .core import PointSet
from .errors import ValidationError

_COORD_TOL = 1e-9


def grid_coords(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) centers of all cells, row-major, shape (h*w, 2).

    Cell (r, c) maps to ((c + 0.5) / D, (r + 0.5) / D) with D = max(h, w).
    """
    if height < 1 or width < 1:
        raise ValidationError("grid dimensions must be >= 1")
    d = float(max(height, width))
    cx = (np.arange(width) + 0.5) / d
    cy = (np.arange(height) + 0.5) / d
    xs, ys = np.meshgrid(cx, cy)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def normalize_points(points: PointSet, height: int, width: int) -> PointSet:
    """Map grid-frame point coordinates into the same unit square as
    :func:`grid_coords` (divide by D = max(height, width))."""
    if height < 1 or width < 1:
        raise ValidationError("grid dimensions must be >= 1")
    d = float(max(height, width))
    pts = points.points
    if pts.size and (pts[:, 0].max() > width + _COORD_TOL or pts[:, 1].max() > height + _COORD_TOL):
        raise ValidationError("point outside grid extent")
    return PointSet(pts / d, class_label=points.class_label)


def _as_coords(points, arity: str) -> np.ndarray:
    arr = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"{arity} coordinates must be (k, 2)")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{arity} coordinates must be finite")
    if arr.min() < -_COORD_TOL or arr.max() > 1.0 + _COORD_TOL:
        raise ValidationError(f"{arity} coordinates must be normalized to [0, 1]")
    return arr


def cost_matrix(cells, points, eta: float) -> np.ndarray:
    """Exponential-distance transport cost, shape (n_cells, n_points).

    ``C[i, j] = exp(||cells[i] - points[j]||_2 / eta)``; both inputs must be
    in normalized unit-square coordinates.  An empty point set yields a
    valid (n, 0) matrix.
    """
    if not (eta > 0) or not np.isfinite(eta):
        raise ValidationError(f"eta must be > 0, got {eta}")
    xs = _as_coords(cells, "cell")
    ys = _as_coords(points, "point")
    if ys.shape[0] == 0:
        return np.zeros((xs.shape[0], 0), dtype=np.float64)
    diff = xs[:, None, :] - ys[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    return np.exp(dist / eta)
