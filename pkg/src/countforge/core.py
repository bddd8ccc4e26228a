"""Domain types shared by all modules and basic density-map arithmetic.

Conventions used throughout the package:

* point coordinates are continuous ``(x, y)`` pairs in source pixels,
* a density grid stores mass per cell, so its sum is the predicted count
  at any stride,
* all types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_STRIDE = 4
DEFAULT_SIGMA = 1.0


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointSet:
    """Unordered continuous 2-D point annotations.

    ``points`` is an ``(k, 2)`` float array of ``(x, y)`` coordinates;
    any nested sequence of pairs is accepted and copied.
    """

    points: np.ndarray
    class_label: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"points must be (k, 2), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        if pts.size and pts.min() < 0:
            raise ValidationError("point coordinates must be >= 0")
        object.__setattr__(self, "points", _freeze(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DensityGrid:
    """Nonnegative mass-per-cell grid; ``total_count`` is its sum."""

    values: np.ndarray
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2:
            raise ValidationError(f"density values must be 2-D, got {vals.ndim}-D")
        if vals.size == 0:
            raise ValidationError("density grid must have at least one cell")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("density values must be finite")
        if vals.min() < 0:
            raise ValidationError("density values must be >= 0")
        if not (isinstance(self.stride, (int, np.integer)) and self.stride >= 1):
            raise ValidationError(f"stride must be a positive integer, got {self.stride}")
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: "DensityGrid") -> "DensityGrid":
        if not isinstance(other, DensityGrid):
            return NotImplemented
        if other.values.shape != self.values.shape or other.stride != self.stride:
            raise ValidationError("grid shapes/strides differ")
        return DensityGrid(self.values + other.values, stride=self.stride)

    def __mul__(self, alpha: float) -> "DensityGrid":
        alpha = float(alpha)
        if not math.isfinite(alpha) or alpha < 0:
            raise ValidationError("scale factor must be finite and >= 0")
        return DensityGrid(self.values * alpha, stride=self.stride)

    __rmul__ = __mul__


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels, corners (x1, y1) and (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("box coordinates must be finite")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class AnnotatedImage:
    """Image record: per-class point annotations plus reference boxes."""

    id: str
    width: int
    height: int
    class_label: str
    points: PointSet
    boxes: tuple[BoundingBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image '{self.id}': non-positive dimensions")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        pts = self.points.points
        if pts.size:
            if pts[:, 0].max() > self.width or pts[:, 1].max() > self.height:
                raise ValidationError(f"image '{self.id}': point outside image bounds")
        for b in self.boxes:
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValidationError(f"image '{self.id}': box outside image bounds")

    @property
    def count(self) -> int:
        return len(self.points)


def total_count(grid: DensityGrid) -> float:
    """Predicted object count: the sum of all cell masses."""
    return float(grid.values.sum())


def points_to_grid_frame(points: PointSet, stride: float) -> PointSet:
    """Rescale source-pixel coordinates into grid cells (divide by stride)."""
    if not (stride > 0):
        raise ValidationError(f"stride must be > 0, got {stride}")
    return PointSet(points.points / float(stride), class_label=points.class_label)


def render_gaussian_density(
    points: PointSet,
    height: int,
    width: int,
    stride: int = DEFAULT_STRIDE,
    sigma: float = DEFAULT_SIGMA,
) -> DensityGrid:
    """Rasterize point annotations as a sum of per-point Gaussian blobs.

    Each point contributes a discretized isotropic Gaussian (sigma in grid
    cells) renormalized over the cells it reaches, so its in-grid mass is
    exactly 1 and the grid total equals the number of points regardless of
    border truncation.
    """
    if sigma <= 0 or not math.isfinite(sigma):
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    if height < 1 or width < 1 or stride < 1:
        raise ValidationError("grid dimensions and stride must be >= 1")
    out = np.zeros((height, width), dtype=np.float64)
    extent_x = width * stride
    extent_y = height * stride
    radius = max(1, int(math.ceil(4.0 * sigma)))
    for x, y in points.points:
        if not (0 <= x <= extent_x and 0 <= y <= extent_y):
            raise ValidationError(
                f"point ({x}, {y}) outside source extent {extent_x}x{extent_y}"
            )
        gx = x / stride
        gy = y / stride
        c0 = max(0, int(math.floor(gx - 0.5)) - radius)
        c1 = min(width - 1, int(math.ceil(gx - 0.5)) + radius)
        r0 = max(0, int(math.floor(gy - 0.5)) - radius)
        r1 = min(height - 1, int(math.ceil(gy - 0.5)) + radius)
        cx = np.arange(c0, c1 + 1) + 0.5
        cy = np.arange(r0, r1 + 1) + 0.5
        wx = np.exp(-((cx - gx) ** 2) / (2.0 * sigma * sigma))
        wy = np.exp(-((cy - gy) ** 2) / (2.0 * sigma * sigma))
        blob = wy[:, None] * wx[None, :]
        mass = blob.sum()
        if mass <= 0.0:
            # all weights underflowed (tiny sigma at a border): keep the
            # mass contract by assigning the whole unit to the nearest cell
            nc = min(width - 1, max(0, int(round(gx - 0.5))))
            nr = min(height - 1, max(0, int(round(gy - 0.5))))
            out[nr, nc] += 1.0
        else:
            out[r0 : r1 + 1, c0 : c1 + 1] += blob / mass
    return DensityGrid(out, stride=stride)


# ---------------------------------------------------------------------------
# file formats (JSON, UTF-8, NaN/Inf rejected)
# ---------------------------------------------------------------------------


def _reject_constant(token: str):
    raise ValidationError(f"non-finite literal {token!r} not permitted")


def loads_strict(text: str):
    """json.loads that rejects NaN/Infinity tokens."""
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON: {exc}") from exc


def dumps_canonical(payload) -> str:
    """Deterministic JSON encoding (stable key order comes from dict order)."""
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def grid_to_payload(grid: DensityGrid) -> dict:
    return {
        "height": grid.height,
        "width": grid.width,
        "stride": grid.stride,
        "values": [float(v) for v in grid.values.ravel()],
    }


def grid_from_payload(payload) -> DensityGrid:
    if not isinstance(payload, dict):
        raise ValidationError("density grid JSON must be an object")
    try:
        height = int(payload["height"])
        width = int(payload["width"])
        stride = int(payload["stride"])
        values = payload["values"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"density grid JSON missing/invalid field: {exc}") from exc
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size != height * width:
        raise ValidationError(
            f"values length {arr.size} != height*width = {height * width}"
        )
    return DensityGrid(arr.reshape(height, width), stride=stride)


def load_grid(path) -> DensityGrid:
    with open(path, encoding="utf-8") as fh:
        return grid_from_payload(loads_strict(fh.read()))


def save_grid(grid: DensityGrid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(grid_to_payload(grid)))


def manifest_to_payload(images: Sequence[AnnotatedImage]) -> dict:
    records = []
    for img in images:
        records.append(
            {
                "id": img.id,
                "width": img.width,
                "height": img.height,
                "class": img.class_label,
                "points": [[float(x), float(y)] for x, y in img.points.points],
                "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in img.boxes],
            }
        )
    return {"images": records}


def manifest_from_payload(payload) -> list[AnnotatedImage]:
    if not isinstance(payload, dict) or "images" not in payload:
        raise ValidationError("manifest must be an object with an 'images' list")
    images = []
    seen: set[str] = set()
    for rec in payload["images"]:
        if not isinstance(rec, dict):
            raise ValidationError("manifest image record must be an object")
        rid = rec.get("id")
        try:
            img = AnnotatedImage(
                id=str(rid),
                width=int(rec["width"]),
                height=int(rec["height"]),
                class_label=str(rec["class"]),
                points=PointSet(rec.get("points", []), class_label=str(rec["class"])),
                boxes=tuple(BoundingBox(*map(float, b)) for b in rec.get("boxes", [])),
            )
        except ValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"image '{rid}': invalid record ({exc})") from exc
        if img.id in seen:
            raise ValidationError(f"image '{img.id}': duplicate id")
        seen.add(img.id)
        images.append(img)
    return images


def load_manifest(path) -> list[AnnotatedImage]:
    with open(path, encoding="utf-8") as fh:
        return manifest_from_payload(loads_strict(fh.read()))


def save_manifest(images: Iterable[AnnotatedImage], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(manifest_to_payload(list(images))))
