"""Shared value types: feature maps, queries, scale sets, labels, calibration."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

#: Stride of the feature map relative to image pixels.
STRIDE = 16

#: Process-wide tally of recoverable data problems (clamped coordinates,
#: degenerate boxes, skipped label lines, ...). Keys are short event names.
warning_counter: Counter = Counter()

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")


class DegenerateLabelError(ValueError):
    """Raised for labels whose geometry cannot be used (e.g. zero-width box)."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense stride-16 grid of embeddings, stored height x width x channels."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"feature map must be H x W x C with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def same_extent(self, other: "FeatureMap") -> bool:
        return self.values.shape == other.values.shape


@dataclass(frozen=True)
class Query:
    feature: np.ndarray
    position: Tuple[float, float]

    def __post_init__(self):
        x, y = self.position
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"query position must lie in [0,1]^2, got {self.position}")
        if not np.all(np.isfinite(self.feature)):
            raise ValueError("query feature contains non-finite values")


@dataclass(frozen=True)
class ScaleSet:
    """Preset square mask side-lengths, in feature-map cells.

    ``vertical_expansion`` stretches the mask rows apart so tall categories
    (pedestrians, cyclists) are covered without growing the sample count.
    """

    scales: Tuple[int, ...] = (1, 3, 5, 7, 9)
    vertical_expansion: int = 1

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if len(scales) < 2:
            raise ValueError("a scale set needs at least two scales")
        if any(s <= 0 or s % 2 == 0 for s in scales):
            raise ValueError(f"scales must be odd positive integers, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {scales}")
        if int(self.vertical_expansion) < 1:
            raise ValueError("vertical_expansion must be a positive integer")

    def __len__(self) -> int:
        return len(self.scales)

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    def masks(self) -> list:
        return [MaskSpec(scale=s, vertical_expansion=self.vertical_expansion) for s in self.scales]


#: Per-category defaults: {1,3,5,7,9} for cars; {1,3,5} with 3x / 2x row spread
#: for pedestrians / cyclists.
CATEGORY_SCALE_SETS = {
    "Car": ScaleSet((1, 3, 5, 7, 9), 1),
    "Pedestrian": ScaleSet((1, 3, 5), 3),
    "Cyclist": ScaleSet((1, 3, 5), 2),
}


@dataclass(frozen=True)
class MaskSpec:
    scale: int
    vertical_expansion: int = 1
    center: Tuple[float, float] = (0.0, 0.0)

    @property
    def offsets(self) -> np.ndarray:
        """(scale*scale, 2) array of (dx, dy * v) cell displacements, row-major."""
        half = (self.scale - 1) // 2
        r = np.arange(-half, half + 1, dtype=np.float64)
        dy, dx = np.meshgrid(r, r, indexing="ij")
        return np.stack([dx.ravel(), dy.ravel() * self.vertical_expansion], axis=1)

    def points(self) -> np.ndarray:
        return self.offsets + np.asarray(self.center, dtype=np.float64)


@dataclass(frozen=True)
class ScaleDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        check_simplex(p)

    def expected_scale(self, scale_set: ScaleSet) -> float:
        return float(np.dot(self.probs, scale_set.scales))


def check_simplex(p, atol: float = 1e-6, axis: int = -1) -> None:
    """Raise ValueError unless ``p`` is nonnegative and sums to one along ``axis``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -atol):
        raise ValueError("probabilities must be nonnegative")
    if not np.allclose(p.sum(axis=axis), 1.0, atol=atol, rtol=0):
        raise ValueError("probabilities must sum to 1")


@dataclass(frozen=True)
class Calibration:
    focal_length: float
    principal_point: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")


@dataclass(frozen=True)
class SceneLabel:
    """One ground-truth object.

    ``box2d`` holds the (l, r, t, b) pixel distances from the projected 3D
    center to the left, right, top and bottom box edges.
    """

    class_id: int
    box2d: Tuple[float, float, float, float]
    center3d_proj: Tuple[float, float]
    dims3d: Tuple[float, float, float]
    alpha: float
    depth: float
    location: Optional[Tuple[float, float, float]] = None
    truncated: bool = False

    def __post_init__(self):
        if any(v < 0 for v in self.box2d):
            raise ValueError(f"box distances must be nonnegative, got {self.box2d}")
        if not self.depth > 0:
            raise ValueError("depth must be positive")
        if any(d <= 0 for d in self.dims3d):
            raise ValueError("3D dimensions must be positive")

    @property
    def width2d(self) -> float:
        l, r, _, _ = self.box2d
        return (l + r) / STRIDE

    @property
    def xyxy(self) -> Tuple[float, float, float, float]:
        l, r, t, b = self.box2d
        x, y = self.center3d_proj
        return (x - l, y - t, x + r, y + b)


@dataclass(frozen=True)
class LossWeights:
    class_: float = 2.0
    size2d: float = 10.0
    center3d: float = 5.0
    giou: float = 2.0
    size3d: float = 1.0
    angle: float = 1.0
    depth: float = 1.0
    wsm: float = 0.2

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict:
        return {
            "class_": self.class_, "size2d": self.size2d, "center3d": self.center3d,
            "giou": self.giou, "size3d": self.size3d, "angle": self.angle,
            "depth": self.depth, "wsm": self.wsm,
        }

    def as_tuple(self) -> tuple:
        return tuple(self.as_dict().values())


def normalize_position(pixel_xy: Sequence[float], image_size: Sequence[float]) -> Tuple[float, float]:
    """Map pixel coordinates to [0,1]^2; out-of-image points are clamped and counted."""
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError("image_size must be positive")
    x, y = pixel_xy
    cx, cy = min(max(x, 0.0), w), min(max(y, 0.0), h)
    if (cx, cy) != (x, y):
        warning_counter["position_clamped"] += 1
    return (cx / w, cy / h)


def denormalize_position(norm_xy: Sequence[float], image_size: Sequence[float]) -> Tuple[float, float]:
    return (norm_xy[0] * image_size[0], norm_xy[1] * image_size[1])


def ground_truth_scale(label: SceneLabel) -> float:
    """Box width in feature-map cells, the target for the scale distribution."""
    width = label.width2d
    if width <= 0:
        raise DegenerateLabelError("zero-width box has no scale")
    return width


def out_of_range_fraction(labels: Sequence[SceneLabel], scale_set: ScaleSet) -> float:
    """Fraction of labels whose ground-truth scale falls outside [min, max] of the set."""
    if not labels:
        return 0.0
    lo, hi = scale_set.scales[0], scale_set.scales[-1]
    out = sum(1 for lab in labels if not lo <= ground_truth_scale(lab) <= hi)
    return out / len(labels)
