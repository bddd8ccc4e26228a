"""Multi-class mosaic synthesis: 2x2 collages of randomly cropped images.

Two uses share the machinery: training-time augmentation (small tiles, a
single randomly chosen target class per collage) and evaluation dataset
generation (larger tiles, four distinct classes, every class serving in
turn as the reference, so each collage expands into four query/reference
pairs).

Boundary conventions: a point survives a crop only if strictly inside it;
a reference box only if fully inside.  Tile placement is fixed
TL/TR/BL/BR; only the crop origins are random.  Generation is
deterministic given (manifest, seed): each collage draws from its own
child generator keyed by index, so collages can be built in any order or
in parallel with identical output.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import AnnotatedImage, BoundingBox, PointSet
from .errors import ValidationError

TRAIN_TILE_SIZE = 192
EVAL_TILE_SIZE = 384
_BOX_RETRIES = 200


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned crop window in source-image pixels."""

    source_id: str
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValidationError(f"degenerate crop {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ValidationError("crop origin must be >= 0")

    def to_payload(self) -> dict:
        return {"source_id": self.source_id, "x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class MosaicConfig:
    tile_size: int = TRAIN_TILE_SIZE
    tiles_per_side: int = 2
    distinct_classes_required: bool = False

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValidationError("tile_size must be >= 1")
        if self.tiles_per_side != 2:
            raise ValidationError("only 2x2 mosaics are supported")


TRAIN_CONFIG = MosaicConfig(tile_size=TRAIN_TILE_SIZE, distinct_classes_required=False)
EVAL_CONFIG = MosaicConfig(tile_size=EVAL_TILE_SIZE, distinct_classes_required=True)


@dataclass(frozen=True)
class MosaicSample:
    """A 2x2 collage: tile provenance plus merged annotations.

    ``target_class`` is None until a reference class has been selected.
    """

    width: int
    height: int
    tiles: tuple[CropRect, CropRect, CropRect, CropRect]
    tile_classes: tuple[str, str, str, str]
    per_class_points: dict[str, PointSet]
    per_class_boxes: dict[str, tuple[BoundingBox, ...]]
    target_class: str | None = None

    def __post_init__(self):
        for cls, pts in self.per_class_points.items():
            arr = pts.points
            if arr.size and (arr[:, 0].max() >= self.width or arr[:, 1].max() >= self.height):
                raise ValidationError(f"class '{cls}': point outside mosaic extent")
        if self.target_class is not None and self.target_class not in self.per_class_points:
            raise ValidationError(f"unknown target class '{self.target_class}'")

    @property
    def target_count(self) -> int:
        if self.target_class is None:
            raise ValidationError("no target class selected")
        return len(self.per_class_points[self.target_class])

    @property
    def reference_boxes(self) -> tuple[BoundingBox, ...]:
        if self.target_class is None:
            raise ValidationError("no target class selected")
        return self.per_class_boxes[self.target_class]

    @property
    def has_exemplars(self) -> bool:
        """False when the target retained no reference boxes (unusable pair)."""
        return len(self.reference_boxes) > 0


def crop_with_annotations(
    image: AnnotatedImage, rect: CropRect
) -> tuple[PointSet, tuple[BoundingBox, ...]]:
    """Points strictly inside the rect (translated to rect-local coords)
    and reference boxes fully inside it."""
    if rect.x + rect.w > image.width or rect.y + rect.h > image.height:
        raise ValidationError(
            f"crop {rect} exceeds image '{image.id}' ({image.width}x{image.height})"
        )
    pts = image.points.points
    if pts.size:
        inside = (
            (pts[:, 0] > rect.x)
            & (pts[:, 0] < rect.x + rect.w)
            & (pts[:, 1] > rect.y)
            & (pts[:, 1] < rect.y + rect.h)
        )
        kept = pts[inside] - np.array([rect.x, rect.y], dtype=np.float64)
    else:
        kept = pts
    boxes = tuple(
        b.translated(-rect.x, -rect.y)
        for b in image.boxes
        if b.x1 >= rect.x and b.y1 >= rect.y and b.x2 <= rect.x + rect.w and b.y2 <= rect.y + rect.h
    )
    return PointSet(kept, class_label=image.class_label), boxes


def _draw_crop(image: AnnotatedImage, tile: int, rng: np.random.Generator) -> CropRect:
    if image.width < tile or image.height < tile:
        raise ValidationError(
            f"image '{image.id}' ({image.width}x{image.height}) smaller than tile {tile}"
        )
    x = int(rng.integers(0, image.width - tile + 1))
    y = int(rng.integers(0, image.height - tile + 1))
    return CropRect(source_id=image.id, x=x, y=y, w=tile, h=tile)


def _assemble(
    images: Sequence[AnnotatedImage],
    crops: Sequence[CropRect],
    config: MosaicConfig,
) -> MosaicSample:
    tile = config.tile_size
    offsets = ((0, 0), (tile, 0), (0, tile), (tile, tile))  # TL, TR, BL, BR
    per_class_points: dict[str, list[np.ndarray]] = {}
    per_class_boxes: dict[str, list[BoundingBox]] = {}
    for img, crop, (ox, oy) in zip(images, crops, offsets):
        pts, boxes = crop_with_annotations(img, crop)
        shifted = pts.points + np.array([ox, oy], dtype=np.float64)
        per_class_points.setdefault(img.class_label, []).append(shifted)
        per_class_boxes.setdefault(img.class_label, []).extend(
            b.translated(ox, oy) for b in boxes
        )
    merged_points = {
        cls: PointSet(np.concatenate(chunks) if chunks else np.zeros((0, 2)), class_label=cls)
        for cls, chunks in per_class_points.items()
    }
    merged_boxes = {cls: tuple(boxes) for cls, boxes in per_class_boxes.items()}
    return MosaicSample(
        width=2 * tile,
        height=2 * tile,
        tiles=tuple(crops),
        tile_classes=tuple(img.class_label for img in images),
        per_class_points=merged_points,
        per_class_boxes=merged_boxes,
    )


def build_mosaic(
    images: Sequence[AnnotatedImage],
    config: MosaicConfig,
    rng: np.random.Generator,
) -> MosaicSample:
    """Crop four images and arrange them TL/TR/BL/BR into one collage."""
    if len(images) != 4:
        raise ValidationError(f"need exactly 4 images, got {len(images)}")
    if config.distinct_classes_required:
        labels = [img.class_label for img in images]
        if len(set(labels)) != 4:
            raise ValidationError(f"classes must be distinct, got {labels}")
    crops = [_draw_crop(img, config.tile_size, rng) for img in images]
    return _assemble(images, crops, config)


def select_target(mosaic: MosaicSample, rng: np.random.Generator) -> MosaicSample:
    """Pick the reference class uniformly among the four tiles."""
    idx = int(rng.integers(0, 4))
    return replace(mosaic, target_class=mosaic.tile_classes[idx])


def _build_with_exemplars(
    images: Sequence[AnnotatedImage],
    config: MosaicConfig,
    rng: np.random.Generator,
    require_all: bool,
    target_idx: int | None = None,
) -> MosaicSample:
    """Build a collage, redrawing any tile whose class would serve as a
    reference but retained no box (a pair without exemplars is ill-posed)."""
    crops = [_draw_crop(img, config.tile_size, rng) for img in images]
    needed = range(4) if require_all else [target_idx]
    for i in needed:
        img = images[i]
        for attempt in range(_BOX_RETRIES + 1):
            _, boxes = crop_with_annotations(img, crops[i])
            if boxes:
                break
            if attempt == _BOX_RETRIES:
                raise ValidationError(
                    f"image '{img.id}': no crop retained a reference box after "
                    f"{_BOX_RETRIES} tries"
                )
            crops[i] = _draw_crop(img, config.tile_size, rng)
    return _assemble(images, crops, config)


def _child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))


def generate_mosaic_dataset(
    images: Sequence[AnnotatedImage],
    n_queries: int,
    config: MosaicConfig = EVAL_CONFIG,
    seed: int = 0,
) -> dict:
    """Synthesize an evaluation manifest of ``n_queries`` collages.

    In evaluation mode (distinct classes) every collage expands into four
    pairs, one per tile class serving as the reference; in training mode
    each collage yields a single pair with a randomly selected target.
    Output is a JSON-ready payload, byte-reproducible from (images, seed).
    """
    if n_queries < 1:
        raise ValidationError("n_queries must be >= 1")
    by_class: dict[str, list[AnnotatedImage]] = {}
    for img in images:
        by_class.setdefault(img.class_label, []).append(img)
    classes = sorted(by_class)
    if config.distinct_classes_required and len(classes) < 4:
        raise ValidationError(
            f"need >= 4 distinct classes for evaluation mosaics, got {len(classes)}"
        )
    if not classes:
        raise ValidationError("manifest has no images")

    pairs = []
    for q in range(n_queries):
        rng = _child_rng(seed, q)
        if config.distinct_classes_required:
            chosen_classes = [str(c) for c in rng.choice(classes, size=4, replace=False)]
        else:
            chosen_classes = [str(c) for c in rng.choice(classes, size=4, replace=True)]
        chosen = []
        for cls in chosen_classes:
            pool = by_class[cls]
            chosen.append(pool[int(rng.integers(0, len(pool)))])
        if config.distinct_classes_required:
            sample = _build_with_exemplars(chosen, config, rng, require_all=True)
            targets = list(sample.tile_classes)
        else:
            target_idx = int(rng.integers(0, 4))
            sample = _build_with_exemplars(
                chosen, config, rng, require_all=False, target_idx=target_idx
            )
            targets = [sample.tile_classes[target_idx]]
        for t_i, target in enumerate(targets):
            targeted = replace(sample, target_class=target)
            pairs.append(
                {
                    "pair_id": f"q{q:05d}_p{t_i}",
                    "mosaic_id": f"q{q:05d}",
                    "tiles": [c.to_payload() for c in targeted.tiles],
                    "tile_classes": list(targeted.tile_classes),
                    "target_class": target,
                    "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in targeted.reference_boxes],
                    "gt_count": targeted.target_count,
                    "points": [
                        [float(x), float(y)]
                        for x, y in targeted.per_class_points[target].points
                    ],
                }
            )
    return {
        "seed": seed,
        "config": {
            "tile_size": config.tile_size,
            "tiles_per_side": config.tiles_per_side,
            "distinct_classes_required": config.distinct_classes_required,
        },
        "pairs": pairs,
    }


def pairs_csv_text(manifest_payload: dict) -> str:
    """Companion CSV (pair_id, target_class, gt_count) for metric joins."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair_id", "target_class", "gt_count"])
    for pair in manifest_payload["pairs"]:
        writer.writerow([pair["pair_id"], pair["target_class"], pair["gt_count"]])
    return buf.getvalue()
