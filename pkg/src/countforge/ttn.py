"""Test-time normalization: tile a query into M x M pieces when the
reference objects are tiny relative to it, count each resized tile
independently (the counting callback is the caller's), and sum.

The module only plans and aggregates; keeping the per-tile counter
external makes the normalization step explicit and auditable, since it
can flip aggregate error metrics on a handful of large-count queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import BoundingBox
from .errors import ValidationError
from .mosaic import CropRect


@dataclass(frozen=True)
class TtnConfig:
    M: int = 8
    T: float = 0.0002

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("M must be >= 1")
        if not (self.T > 0):
            raise ValidationError("T must be > 0")


@dataclass(frozen=True)
class TtnPlan:
    normalize: bool
    tiles: tuple[CropRect, ...]
    query_w: int
    query_h: int

    @property
    def scale_factors(self) -> tuple[tuple[float, float], ...]:
        """Per tile, the (sx, sy) factors that resize it to the query size."""
        return tuple((self.query_w / t.w, self.query_h / t.h) for t in self.tiles)

    def to_payload(self) -> dict:
        return {
            "normalize": self.normalize,
            "tiles": [[t.x, t.y, t.w, t.h] for t in self.tiles],
            "scales": [[sx, sy] for sx, sy in self.scale_factors],
        }


def should_normalize(
    ref_boxes: Sequence[BoundingBox], query_w: int, query_h: int, config: TtnConfig = TtnConfig()
) -> bool:
    """True iff mean(reference areas) / query area < T (strictly)."""
    if not ref_boxes:
        raise ValidationError("need at least one reference box")
    if query_w < 1 or query_h < 1:
        raise ValidationError("query dimensions must be >= 1")
    mean_area = sum(b.area for b in ref_boxes) / len(ref_boxes)
    return mean_area / (query_w * query_h) < config.T


def _partition(total: int, parts: int) -> list[tuple[int, int]]:
    """Balanced integer partition: (offset, length) per part, lengths
    differing by at most one."""
    edges = [(k * total) // parts for k in range(parts + 1)]
    return [(edges[k], edges[k + 1] - edges[k]) for k in range(parts)]


def plan_tiles(query_w: int, query_h: int, config: TtnConfig = TtnConfig()) -> TtnPlan:
    """An M x M disjoint cover of the query by near-equal tiles."""
    if query_w < config.M or query_h < config.M:
        raise ValidationError(
            f"query {query_w}x{query_h} smaller than {config.M} tiles per side"
        )
    tiles = []
    for y, h in _partition(query_h, config.M):
        for x, w in _partition(query_w, config.M):
            tiles.append(CropRect(source_id="query", x=x, y=y, w=w, h=h))
    return TtnPlan(normalize=True, tiles=tuple(tiles), query_w=query_w, query_h=query_h)


def full_frame_plan(query_w: int, query_h: int) -> TtnPlan:
    """The no-normalization plan: one tile covering the whole query."""
    rect = CropRect(source_id="query", x=0, y=0, w=query_w, h=query_h)
    return TtnPlan(normalize=False, tiles=(rect,), query_w=query_w, query_h=query_h)


def make_plan(
    ref_boxes: Sequence[BoundingBox], query_w: int, query_h: int, config: TtnConfig = TtnConfig()
) -> TtnPlan:
    """Threshold decision plus the matching tiling."""
    if should_normalize(ref_boxes, query_w, query_h, config):
        return plan_tiles(query_w, query_h, config)
    return full_frame_plan(query_w, query_h)


def aggregate_counts(plan: TtnPlan, tile_counts: Sequence[float]) -> float:
    """Sum of per-tile counts, in fixed order for bit-stable output."""
    if len(tile_counts) != len(plan.tiles):
        raise ValidationError(
            f"{len(tile_counts)} counts for {len(plan.tiles)} tiles"
        )
    return math.fsum(tile_counts)
