"""Synthetic pinhole scenes, KITTI label I/O and the on-disk dataset layout.

Objects are fronto-parallel shaded rectangles, so every label is exact: the
2D box is the projection of a ``w_3d x h_3d`` rectangle at depth ``z`` and the
pinhole relation ``z = f * h_3d / (t + b)`` holds to float precision.

On-disk layout of one split::

    <root>/<split>/manifest.txt        one sample id per line
    <root>/<split>/image/<id>.pgm      8-bit grayscale image
    <root>/<split>/label/<id>.txt      KITTI 15-field object labels
    <root>/<split>/calib/<id>.txt      "P2:" projection row, KITTI style
    <root>/<split>/depth/<id>.bin      stride-16 dense depth (see write_depth_map)
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .core_types import (CLASS_NAMES, STRIDE, Calibration, SceneLabel, warning_counter)

logger = logging.getLogger(__name__)

DEFAULT_SIZE_RANGES = {
    # (h, w, l) ranges in meters
    "Car": ((1.4, 1.7), (1.5, 1.8), (3.5, 4.5)),
    "Pedestrian": ((1.6, 1.9), (0.5, 0.7), (0.6, 1.0)),
    "Cyclist": ((1.6, 1.8), (0.5, 0.7), (1.5, 1.9)),
}

DEPTH_MAGIC = b"SDPT"
DEPTH_VERSION = 1
_DEPTH_HEADER = struct.Struct("<4sHIIB")


class KittiParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class SceneConfig:
    image_size: Tuple[int, int] = (640, 192)
    object_count: Tuple[int, int] = (1, 5)
    depth_range: Tuple[float, float] = (4.0, 40.0)
    class_names: Tuple[str, ...] = ("Car",)
    focal_length: float = 700.0
    noise: float = 0.05
    seed: int = 0
    resample: bool = True
    max_overlap: float = 0.3
    max_tries: int = 100

    def __post_init__(self):
        if not self.depth_range[0] > 0 or self.depth_range[1] <= self.depth_range[0]:
            raise ValueError("depth_range must satisfy 0 < z_min < z_max")
        if self.object_count[0] < 0 or self.object_count[1] < self.object_count[0]:
            raise ValueError("object_count must be a nonnegative (min, max) range")
        if any(s % STRIDE for s in self.image_size):
            raise ValueError("image dimensions must be divisible by 16")
        unknown = set(self.class_names) - set(DEFAULT_SIZE_RANGES)
        if unknown:
            raise ValueError(f"no size prior for classes {sorted(unknown)}")

    @property
    def calibration(self) -> Calibration:
        w, h = self.image_size
        return Calibration(self.focal_length, (w / 2.0, h / 2.0))


@dataclass
class SceneSample:
    image: np.ndarray  # [H, W] float32 in [0, 1]
    labels: List[SceneLabel]
    depth_map: np.ndarray  # [H/16, W/16] float32, positive
    calibration: Calibration
    sample_id: str = ""
    fg_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.fg_mask is None:
            _, self.fg_mask = rasterize_depth(self.labels, self.image.shape[::-1],
                                              background=float(self.depth_map.max(initial=1.0)))


def project_center(calib: Calibration, x: float, y: float, z: float) -> Tuple[float, float]:
    if not z > 0:
        raise ValueError("point must be in front of the camera (Z > 0)")
    cx, cy = calib.principal_point
    f = calib.focal_length
    return (f * x / z + cx, f * y / z + cy)


def rasterize_depth(labels: Sequence[SceneLabel], image_size: Sequence[int],
                    background: float = 40.0) -> Tuple[np.ndarray, np.ndarray]:
    """Stride-16 depth map and foreground mask from labels (nearest object wins).

    A cell is foreground when its center lies in a box; the cell holding the
    projected center is always foreground so tiny objects are not lost.
    """
    w, h = image_size[0] // STRIDE, image_size[1] // STRIDE
    depth = np.full((h, w), background, dtype=np.float32)
    fg = np.zeros((h, w), dtype=bool)
    xs = (np.arange(w) + 0.5) * STRIDE
    ys = (np.arange(h) + 0.5) * STRIDE
    for lab in sorted(labels, key=lambda lab: -lab.depth):
        x0, y0, x1, y1 = lab.xyxy
        inside = (ys[:, None] >= y0) & (ys[:, None] < y1) & (xs[None, :] >= x0) & (xs[None, :] < x1)
        cx, cy = lab.center3d_proj
        ci = min(max(int(cx // STRIDE), 0), w - 1)
        cj = min(max(int(cy // STRIDE), 0), h - 1)
        inside[cj, ci] = True
        depth[inside] = lab.depth
        fg |= inside
    return depth, fg


def _xyxy_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _place_object(rng: np.random.Generator, config: SceneConfig, name: str,
                  placed: List[SceneLabel]) -> Optional[SceneLabel]:
    calib = config.calibration
    f = config.focal_length
    img_w, img_h = config.image_size
    class_id = CLASS_NAMES.index(name)
    (h_lo, h_hi), (w_lo, w_hi), (l_lo, l_hi) = DEFAULT_SIZE_RANGES[name]
    for _ in range(config.max_tries):
        h3, w3, l3 = rng.uniform(h_lo, h_hi), rng.uniform(w_lo, w_hi), rng.uniform(l_lo, l_hi)
        z = rng.uniform(*config.depth_range)
        bw, bh = f * w3 / z, f * h3 / z
        truncated = False
        if config.resample:
            if bw > img_w or bh > img_h:
                continue
            cx = rng.uniform(bw / 2, img_w - bw / 2)
            cy = rng.uniform(bh / 2, img_h - bh / 2)
        else:
            cx, cy = rng.uniform(0, img_w), rng.uniform(0, img_h)
            truncated = (cx - bw / 2 < 0 or cx + bw / 2 > img_w
                         or cy - bh / 2 < 0 or cy + bh / 2 > img_h)
        box = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
        if any(_xyxy_iou(box, p.xyxy) > config.max_overlap for p in placed):
            continue
        if truncated:
            warning_counter["object_truncated"] += 1
        x = (cx - calib.principal_point[0]) * z / f
        y = (cy - calib.principal_point[1]) * z / f
        alpha = rng.uniform(-math.pi, math.pi)
        return SceneLabel(class_id=class_id, box2d=(bw / 2, bw / 2, bh / 2, bh / 2),
                          center3d_proj=(cx, cy), dims3d=(h3, w3, l3), alpha=alpha,
                          depth=z, location=(x, y, z), truncated=truncated)
    warning_counter["object_placement_failed"] += 1
    return None


def _render(rng: np.random.Generator, config: SceneConfig, labels: Sequence[SceneLabel]) -> np.ndarray:
    img_w, img_h = config.image_size
    yy, xx = np.mgrid[0:img_h, 0:img_w].astype(np.float64) + 0.5
    tilt = rng.uniform(-0.1, 0.1, size=2)
    image = 0.5 + tilt[0] * (xx / img_w - 0.5) + tilt[1] * (yy / img_h - 0.5)
    for lab in sorted(labels, key=lambda lab: -lab.depth):
        x0, y0, x1, y1 = lab.xyxy
        inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        if not inside.any():
            continue
        base = rng.uniform(0.6, 0.95) if rng.random() < 0.5 else rng.uniform(0.05, 0.4)
        # orientation shows up as the direction of the shading gradient
        xr = (xx - lab.center3d_proj[0]) / max(x1 - x0, 1.0) * 2
        yr = (yy - lab.center3d_proj[1]) / max(y1 - y0, 1.0) * 2
        shade = base + 0.1 * (math.cos(lab.alpha) * xr + math.sin(lab.alpha) * yr)
        image = np.where(inside, shade, image)
    image = image + rng.normal(0.0, config.noise, size=image.shape)
    # quantize to 8 bits so the on-disk round trip is exact
    return (np.clip(np.round(image * 255), 0, 255) / 255).astype(np.float32)


def generate_scene(config: SceneConfig = SceneConfig(), seed=None, sample_id: str = "") -> SceneSample:
    """Render one scene; a pure function of ``(config, seed)``."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    lo, hi = config.object_count
    n = int(rng.integers(lo, hi + 1))
    labels: List[SceneLabel] = []
    for _ in range(n):
        name = config.class_names[int(rng.integers(len(config.class_names)))]
        lab = _place_object(rng, config, name, labels)
        if lab is not None:
            labels.append(lab)
    image = _render(rng, config, labels)
    depth, fg = rasterize_depth(labels, config.image_size, background=config.depth_range[1])
    return SceneSample(image, labels, depth, config.calibration, sample_id, fg)


_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def sample_seed(config: SceneConfig, split: str, index: int) -> np.random.SeedSequence:
    code = _SPLIT_CODES.get(split, sum(split.encode()) + 3)
    return np.random.SeedSequence([config.seed, code, index])


def generate_dataset(config: SceneConfig, n: int, split: str = "train") -> List[SceneSample]:
    return [generate_scene(config, sample_seed(config, split, i), sample_id=f"{i:06d}")
            for i in range(n)]


# --------------------------------------------------------------- KITTI text

def format_kitti_label(label: SceneLabel, class_names: Sequence[str] = CLASS_NAMES) -> str:
    h, w, l = label.dims3d
    x, y, z = label.location if label.location is not None else (0.0, 0.0, label.depth)
    ry = label.alpha + math.atan2(x, z)
    left, top, right, bottom = label.xyxy
    fields = [class_names[label.class_id], f"{float(label.truncated):.2f}", "0",
              *(f"{v:.10g}" for v in (label.alpha, left, top, right, bottom, h, w, l,
                                     x, y + h / 2, z, ry))]
    return " ".join(fields)


def load_kitti_labels(text: str, calib: Optional[Calibration] = None,
                      class_names: Sequence[str] = CLASS_NAMES) -> List[SceneLabel]:
    """Parse KITTI object labels.

    KITTI locations are bottom-center; with ``calib`` the projected 3D center
    anchors (l, r, t, b), otherwise the 2D box center does.
    """
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "DontCare":
            continue
        if len(parts) not in (15, 16):
            raise KittiParseError(lineno, f"expected 15 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts[1:15]]
        except ValueError as exc:
            raise KittiParseError(lineno, str(exc)) from None
        if parts[0] not in class_names:
            warning_counter["unknown_class"] += 1
            logger.warning("line %d: skipping unknown class %r", lineno, parts[0])
            continue
        truncated, _occluded, alpha, left, top, right, bottom, h, w, l, x, y, z, _ry = vals
        center3d = (x, y - h / 2, z)
        if calib is not None:
            cx, cy = project_center(calib, *center3d)
        else:
            cx, cy = (left + right) / 2, (top + bottom) / 2
        box = (cx - left, right - cx, cy - top, bottom - cy)
        if min(box) < 0:
            warning_counter["center_outside_box"] += 1
            box = tuple(max(v, 0.0) for v in box)
        try:
            labels.append(SceneLabel(class_id=class_names.index(parts[0]), box2d=box,
                                     center3d_proj=(cx, cy), dims3d=(h, w, l), alpha=alpha,
                                     depth=z, location=center3d, truncated=truncated > 0))
        except ValueError as exc:
            raise KittiParseError(lineno, str(exc)) from None
    return labels


def format_calib(calib: Calibration) -> str:
    f = calib.focal_length
    cx, cy = calib.principal_point
    row = [f, 0, cx, 0, 0, f, cy, 0, 0, 0, 1, 0]
    return "P2: " + " ".join(f"{v:.10g}" for v in row) + "\n"


def load_calib(text: str) -> Calibration:
    for line in text.splitlines():
        if line.startswith("P2:"):
            v = [float(t) for t in line.split()[1:]]
            return Calibration(v[0], (v[2], v[6]))
    raise ValueError("no P2 projection row in calibration text")


# --------------------------------------------------------------- depth files

def write_depth_map(path, depth: np.ndarray) -> None:
    """Header ``<4s H I I B>`` = magic, version, height, width, element bytes; then float32 LE."""
    depth = np.ascontiguousarray(depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, DEPTH_VERSION, depth.shape[0], depth.shape[1], 4))
        fh.write(depth.tobytes())


def read_depth_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, h, w, width = _DEPTH_HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth map file")
    if version != DEPTH_VERSION or width != 4:
        raise ValueError(f"{path}: unsupported depth format (version {version}, width {width})")
    data = np.frombuffer(blob, dtype="<f4", offset=_DEPTH_HEADER.size)
    if data.size != h * w:
        raise ValueError(f"{path}: truncated depth map")
    return data.reshape(h, w).astype(np.float32)


def write_dataset(root, split: str, samples: Sequence[SceneSample],
                  class_names: Sequence[str] = CLASS_NAMES) -> Path:
    base = Path(root) / split
    for sub in ("image", "label", "calib", "depth"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = s.sample_id or f"{i:06d}"
        ids.append(sid)
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="L").save(base / "image" / f"{sid}.pgm")
        (base / "label" / f"{sid}.txt").write_text(
            "".join(format_kitti_label(lab, class_names) + "\n" for lab in s.labels))
        (base / "calib" / f"{sid}.txt").write_text(format_calib(s.calibration))
        write_depth_map(base / "depth" / f"{sid}.bin", s.depth_map)
    (base / "manifest.txt").write_text("".join(sid + "\n" for sid in ids))
    return base


def read_manifest(root, split: str) -> List[str]:
    return (Path(root) / split / "manifest.txt").read_text().split()


def read_sample(root, split: str, sample_id: str,
                class_names: Sequence[str] = CLASS_NAMES) -> SceneSample:
    base = Path(root) / split
    img_path = base / "image" / f"{sample_id}.pgm"
    if not img_path.exists():
        raise FileNotFoundError(f"no sample {sample_id!r} in {base}")
    image = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
    calib = load_calib((base / "calib" / f"{sample_id}.txt").read_text())
    labels = load_kitti_labels((base / "label" / f"{sample_id}.txt").read_text(), calib, class_names)
    depth = read_depth_map(base / "depth" / f"{sample_id}.bin")
    return SceneSample(image, labels, depth, calib, sample_id)


def read_dataset(root, split: str, class_names: Sequence[str] = CLASS_NAMES) -> List[SceneSample]:
    return [read_sample(root, split, sid, class_names) for sid in read_manifest(root, split)]


def targets_from_labels(labels: Sequence[SceneLabel], image_size: Sequence[int],
                        class_names: Sequence[str] = ("Car",), dtype=None) -> Dict[str, torch.Tensor]:
    """Normalized training targets for one image; labels of other classes are dropped.

    Centers are divided by the image size and (l, r, t, b) by (W, W, H, H).
    """
    dtype = dtype or torch.get_default_dtype()
    w, h = image_size
    keep = [lab for lab in labels if CLASS_NAMES[lab.class_id] in class_names]
    n = len(keep)

    def t(rows, width):
        return torch.tensor(rows, dtype=dtype).reshape(n, width)

    return {
        "labels": torch.tensor([list(class_names).index(CLASS_NAMES[lab.class_id]) for lab in keep],
                               dtype=torch.long),
        "center": t([(lab.center3d_proj[0] / w, lab.center3d_proj[1] / h) for lab in keep], 2),
        "ltrb": t([(lab.box2d[0] / w, lab.box2d[1] / w, lab.box2d[2] / h, lab.box2d[3] / h)
                   for lab in keep], 4),
        "dims": t([lab.dims3d for lab in keep], 3),
        "alpha": t([lab.alpha for lab in keep], 1).reshape(n),
        "depth": t([lab.depth for lab in keep], 1).reshape(n),
        "scale": t([lab.width2d for lab in keep], 1).reshape(n),
        "xyxy": t([lab.xyxy for lab in keep], 4),
    }
