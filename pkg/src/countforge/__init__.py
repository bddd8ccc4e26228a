"""countforge: numerical machinery for multi-class density-map counting.

Subpackages cover the shared domain types (`core`), the transport-cost
builder (`transport`), the unbalanced optimal-transport counting loss
(`gl`), mosaic dataset synthesis (`mosaic`), the counting metric suite
(`metrics`), test-time tiling (`ttn`), and a desk-scale training recipe
demonstration (`demo`).
"""

__version__ = "0.1.0"

from .core import (
    AnnotatedImage,
    BoundingBox,
    DensityGrid,
    PointSet,
    render_gaussian_density,
    points_to_grid_frame,
    total_count,
)
from .errors import NumericalError, ValidationError, ZeroCountError

__all__ = [
    "AnnotatedImage",
    "BoundingBox",
    "DensityGrid",
    "PointSet",
    "render_gaussian_density",
    "points_to_grid_frame",
    "total_count",
    "NumericalError",
    "ValidationError",
    "ZeroCountError",
    "__version__",
]
