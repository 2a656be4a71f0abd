"""Scale-aware deformable attention.

Tensors follow the torch layout: feature maps are ``[B, C, H, W]`` and query
positions are ``[B, N, 2]`` as normalized ``(x, y)`` in ``[0, 1]``. A
normalized position maps to continuous cell coordinates ``x * W - 0.5``, so
cell ``(i, j)`` sits at its own center and bilinear sampling at an integer
cell coordinate returns that cell exactly. Sampling clamps at the border.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core_types import ScaleSet


def positions_to_cells(positions: Tensor, height: int, width: int) -> Tensor:
    scale = positions.new_tensor([width, height])
    return positions * scale - 0.5


def cells_to_positions(cells: Tensor, height: int, width: int) -> Tensor:
    scale = cells.new_tensor([width, height])
    return (cells + 0.5) / scale


def bilinear_sample(feat: Tensor, cells: Tensor) -> Tensor:
    """Sample ``feat`` [B, C, H, W] at continuous cell coordinates [B, P, 2] -> [B, P, C]."""
    _, _, h, w = feat.shape
    scale = cells.new_tensor([w, h])
    grid = 2.0 * (cells + 0.5) / scale - 1.0
    out = F.grid_sample(feat, grid.unsqueeze(2), mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out.squeeze(-1).transpose(1, 2)


def mask_offsets(scale_set: ScaleSet, like: Tensor) -> list:
    return [torch.as_tensor(m.offsets, dtype=like.dtype, device=like.device)
            for m in scale_set.masks()]


def extract_multiscale_features(feat_v: Tensor, positions: Tensor, scale_set: ScaleSet,
                                return_samples: bool = False):
    """Average the visual features inside each preset mask around every query.

    Returns ``[B, N, N_l, C]``; with ``return_samples`` also the list of raw
    per-scale samples ``[B, N, l*l, C]`` before averaging.
    """
    if not torch.isfinite(feat_v).all():
        raise ValueError("visual feature map contains non-finite values")
    b, _, h, w = feat_v.shape
    n = positions.shape[1]
    centers = positions_to_cells(positions, h, w)
    offsets = mask_offsets(scale_set, centers)
    sizes = [o.shape[0] for o in offsets]
    pts = centers.unsqueeze(2) + torch.cat(offsets, 0)  # [B, N, sum l*l, 2]
    samples = bilinear_sample(feat_v, pts.reshape(b, -1, 2)).reshape(b, n, sum(sizes), -1)
    per_scale = torch.split(samples, sizes, dim=2)
    averaged = torch.stack([s.mean(dim=2) for s in per_scale], dim=2)
    if return_samples:
        return averaged, list(per_scale)
    return averaged


def sample_depth_feature(feat_d: Tensor, positions: Tensor) -> Tensor:
    _, _, h, w = feat_d.shape
    return bilinear_sample(feat_d, positions_to_cells(positions, h, w))


def predict_scale_distribution(depth_feature: Tensor, projection: nn.Module) -> Tensor:
    """Softmax over the scale set of a pointwise projection of the depth feature."""
    return torch.softmax(projection(depth_feature), dim=-1)


def mix_scales(multiscale: Tensor, probs: Tensor) -> Tensor:
    """Per-query probability-weighted sum of the multi-scale features -> [B, N, C]."""
    return (multiscale * probs.unsqueeze(-1)).sum(dim=-2)


def batch_norm_rows(x: Tensor, bn: nn.BatchNorm1d) -> Tensor:
    """Batch-normalize rows of ``x`` [..., C] over all leading axes.

    A single row cannot provide batch statistics, so it uses the running
    estimates even in training mode.
    """
    shape = x.shape
    flat = x.reshape(-1, shape[-1])
    use_batch = bn.training and flat.shape[0] > 1
    out = F.batch_norm(flat, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                       training=use_batch, momentum=bn.momentum, eps=bn.eps)
    return out.reshape(shape)


def build_scale_aware_filter(multiscale: Tensor, probs: Tensor, mixer: nn.Module,
                             bn: nn.BatchNorm1d) -> Tensor:
    mixed = mix_scales(multiscale, probs)
    return F.relu(batch_norm_rows(mixer(mixed), bn))


def predict_keypoints(filt: Optional[Tensor], query_feat: Tensor, offset_head: nn.Module,
                      attention_head: nn.Module, n_heads: int, n_points: int):
    """Predict key-point offsets [B, N, M, K, 2] (cells) and weights [B, N, M, K].

    ``filt`` modulates the query feature elementwise; ``None`` gives plain
    deformable attention. An offset head with ``K * 2`` outputs shares its
    offsets across heads.
    """
    u = query_feat if filt is None else filt * query_feat
    lead = u.shape[:-1]
    raw = offset_head(u)
    if raw.shape[-1] == n_points * 2:
        offsets = raw.reshape(*lead, 1, n_points, 2).expand(*lead, n_heads, n_points, 2)
    else:
        offsets = raw.reshape(*lead, n_heads, n_points, 2)
    attn = torch.softmax(attention_head(u).reshape(*lead, n_heads, n_points), dim=-1)
    return offsets, attn


def deformable_aggregate(feat_v: Tensor, positions: Tensor, offsets: Tensor, attn: Tensor,
                         value_proj: nn.Module, output_proj: nn.Module) -> Tensor:
    """Attention-weighted sum of per-head projected features at the key points."""
    b, c, h, w = feat_v.shape
    _, n, m, k, _ = offsets.shape
    d = c // m
    value = value_proj(feat_v.permute(0, 2, 3, 1))  # [B, H, W, C]
    value = value.reshape(b, h, w, m, d).permute(0, 3, 4, 1, 2).reshape(b * m, d, h, w)
    centers = positions_to_cells(positions, h, w)
    pts = centers[:, :, None, None, :] + offsets  # [B, N, M, K, 2]
    pts = pts.permute(0, 2, 1, 3, 4).reshape(b * m, n * k, 2)
    sampled = bilinear_sample(value, pts).reshape(b, m, n, k, d)
    weighted = (sampled * attn.permute(0, 2, 1, 3).unsqueeze(-1)).sum(dim=3)  # [B, M, N, d]
    heads = weighted.permute(0, 2, 1, 3).reshape(b, n, m * d)
    return output_proj(heads)


@dataclass
class SSDAOutput:
    features: Tensor
    probs: Optional[Tensor]
    offsets: Tensor
    attention: Tensor
    filter: Optional[Tensor] = None

    def keypoint_cells(self, positions: Tensor, height: int, width: int) -> Tensor:
        centers = positions_to_cells(positions, height, width)
        return centers[:, :, None, None, :] + self.offsets


class ScaleAwareDeformableAttention(nn.Module):
    """Deformable attention whose key points are steered by a predicted object scale.

    With ``scale_aware=False`` the layer degrades to plain single-level
    deformable attention (offsets and weights from the query feature alone).
    """

    def __init__(self, channels: int = 256, n_heads: int = 8, n_points: int = 4,
                 scale_set: ScaleSet = ScaleSet(), scale_aware: bool = True,
                 shared_head_offsets: bool = False):
        super().__init__()
        if channels % n_heads:
            raise ValueError("channels must be divisible by n_heads")
        self.channels = channels
        self.n_heads = n_heads
        self.n_points = n_points
        self.scale_set = scale_set
        self.scale_aware = scale_aware
        self.shared_head_offsets = shared_head_offsets

        if scale_aware:
            self.scale_projection = nn.Linear(channels, len(scale_set))
            self.filter_mixer = nn.Linear(channels, channels)
            self.filter_bn = nn.BatchNorm1d(channels)
        n_off = n_points * 2 if shared_head_offsets else n_heads * n_points * 2
        self.offset_head = nn.Linear(channels, n_off)
        self.attention_head = nn.Linear(channels, n_heads * n_points)
        self.value_proj = nn.Linear(channels, channels)
        self.output_proj = nn.Linear(channels, channels)
        self.reset_parameters()

    def reset_parameters(self, zero_heads: bool = False):
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.attention_head.weight)
        nn.init.zeros_(self.attention_head.bias)
        with torch.no_grad():
            if zero_heads:
                self.offset_head.bias.zero_()
            else:
                self.offset_head.bias.copy_(self._ring_offsets().flatten())
        if self.scale_aware:
            nn.init.zeros_(self.scale_projection.weight)
            nn.init.zeros_(self.scale_projection.bias)
            nn.init.xavier_uniform_(self.filter_mixer.weight)
            nn.init.zeros_(self.filter_mixer.bias)
            self.filter_bn.reset_parameters()
            self.filter_bn.reset_running_stats()

    def _ring_offsets(self) -> Tensor:
        # heads look in evenly spaced directions, point k at radius k + 1 cells
        m = 1 if self.shared_head_offsets else self.n_heads
        theta = torch.arange(m, dtype=torch.float32) * (2 * math.pi / m)
        direction = torch.stack([theta.cos(), theta.sin()], -1)
        direction = direction / direction.abs().max(-1, keepdim=True)[0]
        radius = torch.arange(1, self.n_points + 1, dtype=torch.float32)
        return direction[:, None, :] * radius[None, :, None]

    def forward(self, query_feat: Tensor, positions: Tensor, feat_v: Tensor,
                feat_d: Optional[Tensor] = None) -> SSDAOutput:
        probs = filt = None
        if self.scale_aware:
            if feat_d is None:
                raise ValueError("scale-aware attention needs the depth feature map")
            multiscale = extract_multiscale_features(feat_v, positions, self.scale_set)
            probs = predict_scale_distribution(sample_depth_feature(feat_d, positions),
                                               self.scale_projection)
            filt = build_scale_aware_filter(multiscale, probs, self.filter_mixer, self.filter_bn)
        offsets, attn = predict_keypoints(filt, query_feat, self.offset_head, self.attention_head,
                                          self.n_heads, self.n_points)
        agg = deformable_aggregate(feat_v, positions, offsets, attn, self.value_proj,
                                   self.output_proj)
        return SSDAOutput(features=query_feat + agg, probs=probs, offsets=offsets,
                          attention=attn, filter=filt)


def ssda_forward(layer: ScaleAwareDeformableAttention, query_feat: Tensor, positions: Tensor,
                 feat_v: Tensor, feat_d: Tensor) -> SSDAOutput:
    return layer(query_feat, positions, feat_v, feat_d)
