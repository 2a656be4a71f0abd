"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .core_types import STRIDE, SceneLabel


def check_images(X, image_size: Sequence[int] = None) -> np.ndarray:
    """Return images as float32 ``[n, 1, H, W]``.

    Accepts ``[H, W]``, ``[n, H, W]`` or ``[n, 1, H, W]`` arrays with finite values.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None, None]
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected grayscale images [n, H, W] or [n, 1, H, W], got shape {X.shape}")
    h, w = X.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {w}x{h} is not divisible by {STRIDE}")
    if image_size is not None and (w, h) != tuple(image_size):
        raise ValueError(f"image size {w}x{h} does not match the model's {tuple(image_size)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, n: int) -> List[List[SceneLabel]]:
    if y is None:
        raise ValueError("labels are required when X is an image array")
    y = [list(labels) for labels in y]
    if len(y) != n:
        raise ValueError(f"got {len(y)} label lists for {n} images")
    for labels in y:
        for lab in labels:
            if not isinstance(lab, SceneLabel):
                raise TypeError(f"expected SceneLabel, got {type(lab).__name__}")
    return y


def is_sample_list(X) -> bool:
    from .data import SceneSample

    return isinstance(X, (list, tuple)) and len(X) > 0 and isinstance(X[0], SceneSample)
