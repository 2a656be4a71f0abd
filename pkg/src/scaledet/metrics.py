"""Key-point quality metrics, AP at 40 recall positions, and model evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .core_types import STRIDE, ScaleSet
from .losses import box_iou_np, hungarian_match, matching_cost

RECALL_POSITIONS = np.arange(1, 41) / 40.0
HEADLINE_METRICS = ("position_precision", "weighted_position_precision", "mean_scale_error", "ap40")


@dataclass
class KeypointAudit:
    """Key points of one matched query, in image pixels, with its matched GT box."""

    positions: np.ndarray  # [P, 2]
    weights: np.ndarray  # [P], renormalized to sum 1
    box: Sequence[float]  # xyxy

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != self.positions.shape[0]:
            raise ValueError("one weight per key point required")
        total = w.sum()
        self.weights = w / total if total > 0 else np.full_like(w, 1.0 / max(len(w), 1))

    def inside(self) -> np.ndarray:
        x0, y0, x1, y1 = self.box
        x, y = self.positions[:, 0], self.positions[:, 1]
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def position_precision(audits: Sequence[KeypointAudit]) -> Optional[float]:
    total = sum(len(a.positions) for a in audits)
    if total == 0:
        return None
    return float(sum(a.inside().sum() for a in audits) / total)


def weighted_position_precision(audits: Sequence[KeypointAudit]) -> Optional[float]:
    total = sum(a.weights.sum() for a in audits)
    if not audits or total == 0:
        return None
    return float(sum((a.weights * a.inside()).sum() for a in audits) / total)


def chance_position_precision(audits: Sequence[KeypointAudit], image_size: Sequence[float]) -> Optional[float]:
    """Expected position precision of key points scattered uniformly over the image."""
    w, h = image_size
    total = sum(len(a.positions) for a in audits)
    if total == 0:
        return None
    acc = 0.0
    for a in audits:
        x0, y0, x1, y1 = a.box
        area = max(0.0, min(x1, w) - max(x0, 0)) * max(0.0, min(y1, h) - max(y0, 0))
        acc += len(a.positions) * area / (w * h)
    return float(acc / total)


def ap40(detections: Sequence, ground_truths: Sequence, iou_threshold: float = 0.7) -> Optional[float]:
    """2D-box average precision sampled at recall 1/40, 2/40, ..., 1.

    ``detections[i]`` is ``(boxes [n, 4], scores [n])`` for image ``i`` and
    ``ground_truths[i]`` its ``[g, 4]`` boxes (xyxy). Detections are visited by
    descending score and greedily take the best-overlapping unmatched box.
    Returns None when there are no ground-truth boxes.
    """
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in ground_truths]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    entries = []
    for img, (boxes, scores) in enumerate(detections):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        for box, score in zip(boxes, np.asarray(scores, dtype=np.float64).reshape(-1)):
            entries.append((-score, img, box))
    entries.sort(key=lambda e: e[0])
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(entries))
    for i, (_, img, box) in enumerate(entries):
        if len(gts[img]) == 0:
            continue
        iou = box_iou_np(box[None], gts[img])[0]
        iou[taken[img]] = -1.0
        j = int(np.argmax(iou))
        if iou[j] >= iou_threshold:
            taken[img][j] = True
            tp[i] = 1.0
    if not entries:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(entries) + 1)
    # interpolated precision: best precision at any recall >= r
    best_from = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POSITIONS - 1e-12, side="left")
    interp = np.where(idx < len(recall), best_from[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


def mean_scale_error(probs, l_hat, scale_set: ScaleSet) -> Optional[float]:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, len(scale_set))
    l_hat = np.asarray(l_hat, dtype=np.float64).reshape(-1)
    if len(l_hat) == 0:
        return None
    return float(np.abs(probs @ np.asarray(scale_set.scales, dtype=np.float64) - l_hat).mean())


# ----------------------------------------------------------- model evaluation

def keypoint_audits(block: Dict[str, torch.Tensor], image: int, pairs, gt_xyxy,
                    feature_size) -> List[KeypointAudit]:
    h, w = feature_size
    audits = []
    pos = block["positions"][image]
    scale = pos.new_tensor([w, h])
    for q, g in pairs:
        cells = (pos[q] * scale - 0.5) + block["offsets"][image, q]  # [M, K, 2]
        px = ((cells + 0.5) * STRIDE).reshape(-1, 2).cpu().numpy()
        weights = block["attention"][image, q].reshape(-1).cpu().numpy()
        audits.append(KeypointAudit(px, weights, gt_xyxy[g]))
    return audits


@torch.no_grad()
def evaluate(model, samples, batch_size: int = 8, iou_threshold: float = 0.7,
             return_audits: bool = False):
    """Run ``model`` over ``samples`` and report the headline metrics.

    Queries are matched to labels once, on the final block's outputs; every
    block's key points are audited against that same assignment. Absent
    metrics (no labels / no matched queries) are reported as None.
    """
    from .data import targets_from_labels

    cfg = model.cfg
    scale_set = cfg.scale_set
    n_blocks = cfg.decoder_blocks
    model.eval()
    audits = [[] for _ in range(n_blocks)]
    probs = [[] for _ in range(n_blocks)]
    l_hats = []
    dets = [[] for _ in range(n_blocks)]
    gts = []
    img_w, img_h = cfg.image_size
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.as_tensor(np.stack([s.image for s in chunk]))[:, None]
        focal = torch.tensor([s.calibration.focal_length for s in chunk])
        pred = model(images, focal)
        for i, s in enumerate(chunk):
            tgt = targets_from_labels(s.labels, cfg.image_size, cfg.class_names)
            gt_xyxy = tgt["xyxy"].numpy()
            gts.append(gt_xyxy)
            final = pred.final
            if len(tgt["labels"]):
                cost = matching_cost(final["logits"][i], final["center"][i], final["ltrb"][i], tgt)
                pairs = hungarian_match(cost.numpy()).pairs
            else:
                pairs = []
            l_hats.extend(tgt["scale"][[g for _, g in pairs]].tolist())
            for bi, block in enumerate(pred.blocks):
                audits[bi].extend(keypoint_audits(block, i, pairs, gt_xyxy, pred.feature_size))
                if block.get("probs") is not None:
                    probs[bi].extend(block["probs"][i, [q for q, _ in pairs]].tolist())
                center = block["center"][i] * block["center"].new_tensor([img_w, img_h])
                ltrb = block["ltrb"][i] * block["ltrb"].new_tensor([img_w, img_w, img_h, img_h])
                boxes = torch.stack([center[:, 0] - ltrb[:, 0], center[:, 1] - ltrb[:, 2],
                                     center[:, 0] + ltrb[:, 1], center[:, 1] + ltrb[:, 3]], -1)
                scores = block["logits"][i].sigmoid().max(-1)[0]
                dets[bi].append((boxes.numpy(), scores.numpy()))

    def block_metrics(bi):
        mse = mean_scale_error(probs[bi], l_hats, scale_set) if probs[bi] else None
        return {
            "position_precision": position_precision(audits[bi]),
            "weighted_position_precision": weighted_position_precision(audits[bi]),
            "mean_scale_error": mse,
            "ap40": ap40(dets[bi], gts, iou_threshold),
        }

    report = block_metrics(n_blocks - 1)
    for bi in range(n_blocks):
        for k, v in block_metrics(bi).items():
            report[f"{k}_block{bi}"] = v
    if return_audits:
        return report, audits
    return report
