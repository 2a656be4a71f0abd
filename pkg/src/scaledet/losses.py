"""Set matching and the training objective.

Includes the scale-matching loss and its rank-weighted batch form, the 2D/3D
detection terms, depth fusion with a Laplacian uncertainty loss, and a
criterion that combines them over every decoder block.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .core_types import LossWeights, ScaleSet, warning_counter

logger = logging.getLogger(__name__)

SCALE_LOSS_MODES = ("literal", "expected")
WSM_MODES = ("rank", "constant", "log-loss")
TERM_NAMES = ("L_class", "L_2dsize", "L_xy3d", "L_giou", "L_3dsize", "L_angle", "L_depth", "L_WSM")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term} = {value}")
        self.term = term
        self.value = value


# --------------------------------------------------------------------- boxes

def ltrb_to_xyxy(center: Tensor, ltrb: Tensor) -> Tensor:
    cx, cy = center.unbind(-1)
    l, r, t, b = ltrb.unbind(-1)
    return torch.stack([cx - l, cy - t, cx + r, cy + b], dim=-1)


def _giou_parts(a: Tensor, b: Tensor):
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a + area_b - inter
    lt_c = torch.min(a[..., :2], b[..., :2])
    rb_c = torch.max(a[..., 2:], b[..., 2:])
    hull = (rb_c - lt_c).clamp(min=0).prod(-1)
    return inter, union, hull


def generalized_iou(a: Tensor, b: Tensor, eps: float = 1e-9) -> Tensor:
    """Elementwise GIoU of xyxy boxes (broadcasting)."""
    inter, union, hull = _giou_parts(a, b)
    iou = inter / (union + eps)
    return iou - (hull - union) / (hull + eps)


def pairwise_giou(a: Tensor, b: Tensor) -> Tensor:
    return generalized_iou(a[:, None, :], b[None, :, :])


def box_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, numpy, [N, 4] x [G, 4] -> [N, G]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    area_a = np.clip(a[:, 2:] - a[:, :2], 0, None).prod(-1)
    area_b = np.clip(b[:, 2:] - b[:, :2], 0, None).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


# ------------------------------------------------------------------ matching

@dataclass
class MatchResult:
    pairs: List[tuple]
    unmatched_queries: List[int]
    total_cost: float = 0.0

    @property
    def query_indices(self) -> List[int]:
        return [q for q, _ in self.pairs]

    @property
    def label_indices(self) -> List[int]:
        return [g for _, g in self.pairs]


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Globally optimal one-to-one assignment of labels (columns) to queries (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    n_queries = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] == 0:
        return MatchResult([], list(range(n_queries)), 0.0)
    if cost.shape[1] > n_queries:
        raise ValueError("more labels than queries")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = set(rows.tolist())
    return MatchResult(pairs, [q for q in range(n_queries) if q not in matched],
                       float(cost[rows, cols].sum()))


def matching_cost(logits: Tensor, center: Tensor, ltrb: Tensor, target: Dict[str, Tensor],
                  weights: LossWeights = LossWeights()) -> Tensor:
    """Cost matrix [N, G] for one image, built from the 2D loss terms."""
    prob = logits.sigmoid()[:, target["labels"]]
    pred_box = torch.cat([center, ltrb], -1)
    tgt_box = torch.cat([target["center"], target["ltrb"]], -1)
    cost_l1 = torch.cdist(pred_box, tgt_box, p=1)
    giou = pairwise_giou(ltrb_to_xyxy(center, ltrb), ltrb_to_xyxy(target["center"], target["ltrb"]))
    return weights.class_ * (1 - prob) + weights.size2d * cost_l1 + weights.giou * (1 - giou)


# --------------------------------------------------------------- scale terms

def scale_loss(probs: Tensor, l_hat: Tensor, scales: Sequence[float], mode: str = "literal") -> Tensor:
    """Per-query scale-matching loss.

    ``literal`` averages ``|P(l) * l - l_hat|`` over the scale set; ``expected``
    compares the expected scale ``sum_l P(l) * l`` with the target.
    """
    s = torch.as_tensor(scales, dtype=probs.dtype, device=probs.device)
    l_hat = torch.as_tensor(l_hat, dtype=probs.dtype, device=probs.device)
    if mode == "literal":
        return (probs * s - l_hat.unsqueeze(-1)).abs().mean(-1)
    if mode == "expected":
        return ((probs * s).sum(-1) - l_hat).abs()
    raise ValueError(f"unknown scale loss mode {mode!r}")


def expected_scale(probs: Tensor, scales: Sequence[float]) -> Tensor:
    return (probs * torch.as_tensor(scales, dtype=probs.dtype, device=probs.device)).sum(-1)


def rank_index(values) -> np.ndarray:
    """Position of each element in the descending queue; ties keep batch order."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(-values, kind="stable")
    index = np.empty(len(values), dtype=np.int64)
    index[order] = np.arange(len(values))
    return index


def wsm_weights(pred_scales, true_scales) -> np.ndarray:
    pred_scales = np.asarray(pred_scales, dtype=np.float64)
    true_scales = np.asarray(true_scales, dtype=np.float64)
    if pred_scales.shape != true_scales.shape:
        raise ValueError("predicted and true scales must have equal length")
    diff = np.abs(rank_index(true_scales) - rank_index(pred_scales))
    return np.log(diff + 1.0)


def wsm_loss(per_query_losses: Tensor, pred_scales, true_scales, mode: str = "rank") -> Tensor:
    """Batch-mean of weighted per-query scale losses; weights carry no gradient."""
    n = per_query_losses.shape[0]
    if n == 0:
        return per_query_losses.sum()
    if mode == "rank":
        pred = pred_scales.detach().cpu().numpy() if torch.is_tensor(pred_scales) else pred_scales
        true = true_scales.detach().cpu().numpy() if torch.is_tensor(true_scales) else true_scales
        w = torch.as_tensor(wsm_weights(pred, true), dtype=per_query_losses.dtype,
                            device=per_query_losses.device)
    elif mode == "constant":
        w = torch.ones_like(per_query_losses)
    elif mode == "log-loss":
        w = torch.log1p(per_query_losses.detach())
    else:
        raise ValueError(f"unknown WSM weighting mode {mode!r}")
    return (w * per_query_losses).sum() / n


# ------------------------------------------------------------------ 2D terms

def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * loss


def loss_2d(logits: Tensor, class_targets: Tensor, pred_center: Tensor, pred_ltrb: Tensor,
            tgt_center: Tensor, tgt_ltrb: Tensor, num_boxes: float,
            weights: LossWeights = LossWeights()) -> Dict[str, Tensor]:
    """2D terms. ``logits``/``class_targets`` cover all queries; box tensors only matched ones."""
    num_boxes = max(float(num_boxes), 1.0)
    terms = {
        "L_class": sigmoid_focal_loss(logits, class_targets).sum() / num_boxes,
        "L_2dsize": (pred_ltrb - tgt_ltrb).abs().sum() / num_boxes,
        "L_xy3d": (pred_center - tgt_center).abs().sum() / num_boxes,
    }
    giou = generalized_iou(ltrb_to_xyxy(pred_center, pred_ltrb), ltrb_to_xyxy(tgt_center, tgt_ltrb))
    terms["L_giou"] = (1 - giou).sum() / num_boxes
    terms["L_2D"] = (weights.class_ * terms["L_class"] + weights.size2d * terms["L_2dsize"]
                     + weights.center3d * terms["L_xy3d"] + weights.giou * terms["L_giou"])
    return terms


# ------------------------------------------------------------------ 3D terms

def depth_geo(focal, h3d, t_plus_b, eps: float = 1.0):
    """Depth from the pinhole relation between 3D height and 2D box height (pixels)."""
    if torch.is_tensor(t_plus_b):
        if bool((t_plus_b <= eps).any()):
            warning_counter["degenerate_box_height"] += 1
        return focal * h3d / t_plus_b.clamp(min=eps)
    if t_plus_b <= eps:
        warning_counter["degenerate_box_height"] += 1
        logger.warning("box height %s px clamped to %s", t_plus_b, eps)
        t_plus_b = eps
    return focal * h3d / t_plus_b


def depth_fuse(d_reg, d_geo, d_map):
    return (d_reg + d_geo + d_map) / 3.0


def depth_loss(d_gt, d_pre, sigma):
    """Laplacian aleatoric uncertainty loss ``(2 / sigma) |d_gt - d_pre| + ln sigma``."""
    if torch.is_tensor(sigma):
        if bool((sigma <= 0).any()):
            raise ValueError("sigma must be positive")
        return 2.0 / sigma * (d_gt - d_pre).abs() + torch.log(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 2.0 / sigma * abs(d_gt - d_pre) + math.log(sigma)


def angle_loss(pred_sincos: Tensor, alpha: Tensor) -> Tensor:
    target = torch.stack([torch.sin(alpha), torch.cos(alpha)], -1)
    return (pred_sincos - target).abs().sum(-1)


def loss_3d(pred_dims: Tensor, tgt_dims: Tensor, pred_sincos: Tensor, tgt_alpha: Tensor,
            d_gt: Tensor, d_pre: Tensor, sigma: Tensor, num_boxes: float,
            weights: LossWeights = LossWeights(), dense_depth: Optional[Tensor] = None
            ) -> Dict[str, Tensor]:
    num_boxes = max(float(num_boxes), 1.0)
    terms = {
        "L_3dsize": (pred_dims - tgt_dims).abs().sum() / num_boxes,
        "L_angle": angle_loss(pred_sincos, tgt_alpha).sum() / num_boxes,
        "L_depth": depth_loss(d_gt, d_pre, sigma).sum() / num_boxes,
    }
    if dense_depth is not None:
        terms["L_depth"] = terms["L_depth"] + dense_depth
    terms["L_3D"] = (weights.size3d * terms["L_3dsize"] + weights.angle * terms["L_angle"]
                     + weights.depth * terms["L_depth"])
    return terms


def total_loss(l2d, l3d, lwsm, lambda8: float = 0.2):
    for name, v in (("L_2D", l2d), ("L_3D", l3d), ("L_WSM", lwsm)):
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)
    return l2d + l3d + lambda8 * lwsm


# ----------------------------------------------------------------- criterion

@dataclass
class LossBreakdown:
    total: Tensor
    terms: Dict[str, float] = field(default_factory=dict)
    matches: List[List[MatchResult]] = field(default_factory=list)

    def check_finite(self):
        for name, v in self.terms.items():
            if not math.isfinite(v):
                raise NonFiniteLossError(name, v)
        if not torch.isfinite(self.total):
            raise NonFiniteLossError("total", float(self.total))


class SetCriterion:
    """Matches every decoder block's predictions to the labels and sums the weighted terms."""

    def __init__(self, weights: LossWeights = LossWeights(), scale_set: ScaleSet = ScaleSet(),
                 scale_loss_mode: str = "literal", wsm_mode: str = "rank",
                 aux_loss: bool = True):
        if scale_loss_mode not in SCALE_LOSS_MODES:
            raise ValueError(f"scale_loss_mode must be one of {SCALE_LOSS_MODES}")
        if wsm_mode not in WSM_MODES:
            raise ValueError(f"wsm_mode must be one of {WSM_MODES}")
        self.weights = weights
        self.scale_set = scale_set
        self.scale_loss_mode = scale_loss_mode
        self.wsm_mode = wsm_mode
        self.aux_loss = aux_loss

    @torch.no_grad()
    def match(self, block: Dict[str, Tensor], targets: List[Dict[str, Tensor]]) -> List[MatchResult]:
        out = []
        for i, tgt in enumerate(targets):
            if len(tgt["labels"]) == 0:
                out.append(hungarian_match(np.zeros((block["logits"].shape[1], 0))))
                continue
            cost = matching_cost(block["logits"][i], block["center"][i], block["ltrb"][i], tgt,
                                 self.weights)
            out.append(hungarian_match(cost.cpu().numpy()))
        return out

    def block_loss(self, block: Dict[str, Tensor], targets: List[Dict[str, Tensor]],
                   matches: List[MatchResult], dense_term: Optional[Tensor]) -> Dict[str, Tensor]:
        b_idx = torch.cat([torch.full((len(m.pairs),), i, dtype=torch.long)
                           for i, m in enumerate(matches)])
        q_idx = torch.cat([torch.as_tensor(m.query_indices, dtype=torch.long) for m in matches])

        def gather(key):
            return torch.cat([t[key][torch.as_tensor(m.label_indices, dtype=torch.long)]
                              for t, m in zip(targets, matches)])

        num_boxes = len(q_idx)
        logits = block["logits"]
        class_targets = torch.zeros_like(logits)
        if num_boxes:
            class_targets[b_idx, q_idx, gather("labels")] = 1.0
        terms = loss_2d(logits, class_targets, block["center"][b_idx, q_idx],
                        block["ltrb"][b_idx, q_idx], gather("center"), gather("ltrb"),
                        num_boxes, self.weights)
        terms.update(loss_3d(block["dims"][b_idx, q_idx], gather("dims"),
                             block["angle"][b_idx, q_idx], gather("alpha"),
                             gather("depth"), block["d_pre"][b_idx, q_idx],
                             block["log_sigma"][b_idx, q_idx].exp(), num_boxes,
                             self.weights, dense_term))
        probs = block.get("probs")
        if probs is None or num_boxes == 0:
            terms["L_WSM"] = logits.sum() * 0.0
        else:
            p = probs[b_idx, q_idx]
            l_hat = gather("scale")
            per_query = scale_loss(p, l_hat, self.scale_set.scales, self.scale_loss_mode)
            terms["L_WSM"] = wsm_loss(per_query, expected_scale(p, self.scale_set.scales),
                                      l_hat, self.wsm_mode)
        return terms

    def __call__(self, blocks: List[Dict[str, Tensor]], targets: List[Dict[str, Tensor]],
                 dense_term: Optional[Tensor] = None) -> LossBreakdown:
        used = blocks if self.aux_loss else blocks[-1:]
        sums: Dict[str, Tensor] = {}
        all_matches = []
        for block in used:
            matches = self.match(block, targets)
            all_matches.append(matches)
            for k, v in self.block_loss(block, targets, matches, dense_term).items():
                sums[k] = sums.get(k, 0.0) + v
        n = len(used)
        avg = {k: v / n for k, v in sums.items()}
        terms = {k: float(avg[k].detach()) for k in TERM_NAMES}
        for k, v in terms.items():  # name the individual term before the sums
            if not math.isfinite(v):
                raise NonFiniteLossError(k, v)
        total = total_loss(avg["L_2D"], avg["L_3D"], avg["L_WSM"], self.weights.wsm)
        breakdown = LossBreakdown(total, terms, all_matches)
        breakdown.check_finite()
        return breakdown
