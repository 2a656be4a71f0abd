"""scikit-learn style wrapper around the detector.

``fit`` trains end to end, ``predict`` returns per-image detections and
``score`` returns AP40. Hyperparameters are plain constructor arguments, so
``get_params``/``set_params``/``clone`` work as usual.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core_types import LossWeights
from .data import SceneSample, rasterize_depth, targets_from_labels
from .losses import SCALE_LOSS_MODES, TERM_NAMES, WSM_MODES, SetCriterion
from .metrics import evaluate
from .model import ModelConfig, MonoDetector, load_checkpoint, save_checkpoint
from .validation import check_images, check_labels, is_sample_list

logger = logging.getLogger(__name__)


def dense_depth_loss(pred: torch.Tensor, target: torch.Tensor, fg: torch.Tensor) -> torch.Tensor:
    """Mean L1 between predicted and true dense depth over foreground cells."""
    pred = pred[:, 0]
    if not bool(fg.any()):
        return pred.sum() * 0.0
    return (pred - target).abs()[fg].mean()


class ScaleAwareMonoDetector(BaseEstimator):
    def __init__(self, channels=256, heads=8, decoder_blocks=3, queries=50, keypoints=4,
                 encoder_blocks=2, image_size=(640, 192), class_names=("Car",), scales=None,
                 vertical_expansion=None, attention="ssda", shared_head_offsets=False,
                 refine_positions=False, lambda_class=2.0, lambda_size2d=10.0,
                 lambda_center3d=5.0, lambda_giou=2.0, lambda_size3d=1.0, lambda_angle=1.0,
                 lambda_depth=1.0, lambda_wsm=0.2, scale_loss_mode="literal", wsm_mode="rank",
                 aux_loss=True, learning_rate=2e-4, weight_decay=1e-4, epochs=20, batch_size=16,
                 focal_length=700.0, seed=0, log_path=None, checkpoint_path=None,
                 checkpoint_extra=None):
        self.channels = channels
        self.heads = heads
        self.decoder_blocks = decoder_blocks
        self.queries = queries
        self.keypoints = keypoints
        self.encoder_blocks = encoder_blocks
        self.image_size = image_size
        self.class_names = class_names
        self.scales = scales
        self.vertical_expansion = vertical_expansion
        self.attention = attention
        self.shared_head_offsets = shared_head_offsets
        self.refine_positions = refine_positions
        self.lambda_class = lambda_class
        self.lambda_size2d = lambda_size2d
        self.lambda_center3d = lambda_center3d
        self.lambda_giou = lambda_giou
        self.lambda_size3d = lambda_size3d
        self.lambda_angle = lambda_angle
        self.lambda_depth = lambda_depth
        self.lambda_wsm = lambda_wsm
        self.scale_loss_mode = scale_loss_mode
        self.wsm_mode = wsm_mode
        self.aux_loss = aux_loss
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.focal_length = focal_length
        self.seed = seed
        self.log_path = log_path
        self.checkpoint_path = checkpoint_path
        self.checkpoint_extra = checkpoint_extra

    # ------------------------------------------------------------ config

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=int(self.channels), heads=int(self.heads),
            decoder_blocks=int(self.decoder_blocks), queries=int(self.queries),
            keypoints=int(self.keypoints), encoder_blocks=int(self.encoder_blocks),
            image_size=tuple(int(v) for v in self.image_size),
            class_names=tuple(self.class_names),
            scales=tuple(int(s) for s in self.scales) if self.scales else None,
            vertical_expansion=int(self.vertical_expansion) if self.vertical_expansion else None,
            attention=self.attention, shared_head_offsets=bool(self.shared_head_offsets),
            refine_positions=bool(self.refine_positions))

    def validate_params(self) -> None:
        """Raise ValueError for settings that would only fail deep inside ``fit``."""
        if self.scale_loss_mode not in SCALE_LOSS_MODES:
            raise ValueError(f"scale_loss_mode must be one of {SCALE_LOSS_MODES}")
        if self.wsm_mode not in WSM_MODES:
            raise ValueError(f"wsm_mode must be one of {WSM_MODES}")
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not float(self.learning_rate) > 0:
            raise ValueError("learning_rate must be positive")
        self.model_config()
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_class, self.lambda_size2d, self.lambda_center3d,
                           self.lambda_giou, self.lambda_size3d, self.lambda_angle,
                           self.lambda_depth, self.lambda_wsm)

    def _as_samples(self, X, y=None) -> List[SceneSample]:
        if is_sample_list(X):
            return list(X)
        from .core_types import Calibration

        images = check_images(X, self.image_size)
        labels = check_labels(y, len(images))
        w, h = self.image_size
        calib = Calibration(self.focal_length, (w / 2, h / 2))
        out = []
        for img, labs in zip(images, labels):
            depth, fg = rasterize_depth(labs, self.image_size)
            out.append(SceneSample(img[0], labs, depth, calib, fg_mask=fg))
        return out

    # ------------------------------------------------------------ training

    def _batch(self, samples: List[SceneSample], cfg: ModelConfig):
        images = torch.as_tensor(check_images(np.stack([s.image for s in samples]), cfg.image_size))
        focal = torch.tensor([s.calibration.focal_length for s in samples], dtype=torch.float32)
        targets = [targets_from_labels(s.labels, cfg.image_size, cfg.class_names) for s in samples]
        depth = torch.as_tensor(np.stack([s.depth_map for s in samples]))
        fg = torch.as_tensor(np.stack([s.fg_mask for s in samples]))
        return images, focal, targets, depth, fg

    def fit(self, X, y=None):
        """Train on a list of :class:`SceneSample` or on images ``X`` with label lists ``y``."""
        self.validate_params()
        samples = self._as_samples(X, y)
        if not samples:
            raise ValueError("cannot fit on an empty dataset")
        cfg = self.model_config()
        torch.manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        model = MonoDetector(cfg)
        criterion = SetCriterion(self.loss_weights(), cfg.scale_set, self.scale_loss_mode,
                                 self.wsm_mode, self.aux_loss)
        opt = torch.optim.Adam(model.parameters(), lr=self.learning_rate,
                               weight_decay=self.weight_decay)
        self.history_ = []
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            for epoch in range(int(self.epochs)):
                model.train()
                order = rng.permutation(len(samples))
                sums: Dict[str, float] = {}
                steps = 0
                t0 = time.perf_counter()
                for start in range(0, len(order), int(self.batch_size)):
                    batch = [samples[i] for i in order[start:start + int(self.batch_size)]]
                    images, focal, targets, depth, fg = self._batch(batch, cfg)
                    pred = model(images, focal)
                    dense = dense_depth_loss(pred.dense_depth, depth, fg)
                    out = criterion(pred.blocks, targets, dense)
                    opt.zero_grad()
                    out.total.backward()
                    opt.step()
                    for k, v in out.terms.items():
                        sums[k] = sums.get(k, 0.0) + v
                    sums["L_total"] = sums.get("L_total", 0.0) + float(out.total.detach())
                    steps += 1
                rows = [{"epoch": epoch, "term": k, "value": sums[k] / steps}
                        for k in (*TERM_NAMES, "L_total")]
                self.history_.extend(rows)
                logger.info("epoch %d: total %.4f (%.1fs)", epoch, sums["L_total"] / steps,
                            time.perf_counter() - t0)
                if log_fh:
                    for row in rows:
                        log_fh.write(json.dumps(row) + "\n")
                    log_fh.flush()
                self.model_ = model
                if self.checkpoint_path:
                    self.save(self.checkpoint_path, self.checkpoint_extra)
        finally:
            if log_fh:
                log_fh.close()
        self.model_ = model.eval()
        return self

    # ------------------------------------------------------------ inference

    def _forward(self, X, batch_size: int = 8):
        check_is_fitted(self, "model_")
        images = torch.as_tensor(check_images(X, self.image_size))
        outs = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start:start + batch_size]
                outs.append(self.model_(chunk, self.focal_length))
        return outs

    def predict(self, X, score_threshold: float = 0.0) -> List[Dict[str, np.ndarray]]:
        """Detections per image: boxes (xyxy, pixels), scores, classes, 3D attributes."""
        if is_sample_list(X):
            X = np.stack([s.image for s in X])
        w, h = self.image_size
        results = []
        for pred in self._forward(X):
            f = pred.final
            center = f["center"] * f["center"].new_tensor([w, h])
            ltrb = f["ltrb"] * f["ltrb"].new_tensor([w, w, h, h])
            boxes = torch.stack([center[..., 0] - ltrb[..., 0], center[..., 1] - ltrb[..., 2],
                                 center[..., 0] + ltrb[..., 1], center[..., 1] + ltrb[..., 3]], -1)
            probs = f["logits"].sigmoid()
            scores, classes = probs.max(-1)
            sincos = f["angle"]
            for i in range(len(scores)):
                keep = (scores[i] >= score_threshold).nonzero().flatten()
                keep = keep[scores[i, keep].argsort(descending=True)]
                results.append({
                    "boxes": boxes[i, keep].numpy(), "scores": scores[i, keep].numpy(),
                    "classes": classes[i, keep].numpy(), "center3d": center[i, keep].numpy(),
                    "depth": f["d_pre"][i, keep].numpy(), "dims": f["dims"][i, keep].numpy(),
                    "alpha": torch.atan2(sincos[i, keep, 0], sincos[i, keep, 1]).numpy(),
                })
        return results

    def evaluate(self, X, y=None) -> dict:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self._as_samples(X, y))

    def score(self, X, y=None) -> float:
        ap = self.evaluate(X, y)["ap40"]
        return 0.0 if ap is None else ap

    # ------------------------------------------------------------ persistence

    def save(self, path, extra: Optional[dict] = None) -> Path:
        check_is_fitted(self, "model_")
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        return save_checkpoint(path, self.model_, {**(extra or {}),
                                                   "estimator_params": json.dumps(params)})

    @classmethod
    def load(cls, path, return_extra: bool = False):
        model, extra = load_checkpoint(path)
        params = json.loads(extra.get("estimator_params", "{}"))
        est = cls(**params)
        if est.model_config() != model.cfg:
            raise ValueError(f"{path}: stored estimator parameters disagree with the model config")
        est.model_ = model.eval()
        return (est, extra) if return_extra else est
