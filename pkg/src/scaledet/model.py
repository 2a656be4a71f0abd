"""End-to-end monocular detector: conv backbone, visual/depth encoders, decoder, heads."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core_types import CATEGORY_SCALE_SETS, STRIDE, ScaleSet
from .losses import depth_fuse, depth_geo
from .ssda import ScaleAwareDeformableAttention, bilinear_sample

CHECKPOINT_FORMAT = "scaledet-checkpoint"
CHECKPOINT_VERSION = 1

# mean (h, w, l) per class, meters; the dims head predicts a residual
MEAN_DIMS = {"Car": (1.55, 1.65, 4.0), "Pedestrian": (1.75, 0.6, 0.8), "Cyclist": (1.7, 0.6, 1.7)}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 256
    heads: int = 8
    decoder_blocks: int = 3
    queries: int = 50
    keypoints: int = 4
    encoder_blocks: int = 2
    image_size: Tuple[int, int] = (640, 192)
    in_channels: int = 1
    class_names: Tuple[str, ...] = ("Car",)
    scales: Optional[Tuple[int, ...]] = None
    vertical_expansion: Optional[int] = None
    attention: str = "ssda"
    shared_head_offsets: bool = False
    refine_positions: bool = False

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.attention not in ("ssda", "plain"):
            raise ValueError("attention must be 'ssda' or 'plain'")
        if any(s % STRIDE for s in self.image_size):
            raise ValueError("image dimensions must be divisible by 16")
        self.scale_set  # validates

    @property
    def scale_set(self) -> ScaleSet:
        default = CATEGORY_SCALE_SETS[self.class_names[0]]
        return ScaleSet(self.scales or default.scales,
                        self.vertical_expansion or default.vertical_expansion)

    @property
    def feature_size(self) -> Tuple[int, int]:
        """(height, width) of the stride-16 map."""
        return self.image_size[1] // STRIDE, self.image_size[0] // STRIDE

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown model config key {key!r}")
            kwargs[key] = _parse_field(key, raw, kinds[key])
        return cls(**kwargs)


def _parse_field(key, raw: str, kind: str):
    if raw == "" and "Optional" in kind:
        return None
    if "Tuple[str" in kind:
        return tuple(raw.split(","))
    if "Tuple[int" in kind:
        return tuple(int(x) for x in raw.split(","))
    if "bool" in kind:
        return raw.lower() in ("1", "true", "yes")
    if "int" in kind:
        return int(raw)
    return raw


def sine_encoding(coords: Tensor, channels: int, temperature: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of normalized (x, y) [..., 2] -> [..., channels]."""
    n = channels // 4
    freq = temperature ** (torch.arange(n, dtype=coords.dtype, device=coords.device) / n)
    parts = []
    for i in range(2):
        arg = coords[..., i:i + 1] * 2 * math.pi / freq
        parts += [arg.sin(), arg.cos()]
    out = torch.cat(parts, -1)
    if out.shape[-1] < channels:
        out = F.pad(out, (0, channels - out.shape[-1]))
    return out


def grid_positions(h: int, w: int, dtype=torch.float32) -> Tensor:
    ys, xs = torch.meshgrid((torch.arange(h, dtype=dtype) + 0.5) / h,
                            (torch.arange(w, dtype=dtype) + 0.5) / w, indexing="ij")
    return torch.stack([xs, ys], -1).reshape(-1, 2)


def initial_query_positions(n: int, h: int, w: int) -> Tensor:
    rows = max(1, round(math.sqrt(n * h / w)))
    cols = math.ceil(n / rows)
    idx = torch.arange(n)
    x = (idx % cols + 0.5) / cols
    y = (idx // cols + 0.5) / rows
    return torch.stack([x, y], -1).float()


class Backbone(nn.Module):
    """Four stride-2 conv stages; stands in for a pretrained ResNet."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        widths = [max(channels // 4, 8), max(channels // 2, 8), channels, channels]
        layers, prev = [], in_channels
        for wd in widths:
            layers += [nn.Conv2d(prev, wd, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(wd), nn.ReLU(inplace=True)]
            prev = wd
        self.body = nn.Sequential(*layers)

    def forward(self, images: Tensor) -> Tensor:
        h, w = images.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image size {w}x{h} is not divisible by {STRIDE}")
        return self.body(images)


class Encoder(nn.Module):
    def __init__(self, channels: int, heads: int, blocks: int):
        super().__init__()
        layer = nn.TransformerEncoderLayer(channels, heads, dim_feedforward=2 * channels,
                                           dropout=0.0, batch_first=True)
        self.layers = nn.TransformerEncoder(layer, blocks, enable_nested_tensor=False)

    def forward(self, base: Tensor) -> Tensor:
        b, c, h, w = base.shape
        tokens = base.flatten(2).transpose(1, 2)
        tokens = tokens + sine_encoding(grid_positions(h, w, base.dtype).to(base.device), c)
        return self.layers(tokens).transpose(1, 2).reshape(b, c, h, w)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.self_attn = nn.MultiheadAttention(c, cfg.heads, dropout=0.0, batch_first=True)
        self.norm1 = nn.LayerNorm(c)
        self.cross = ScaleAwareDeformableAttention(c, cfg.heads, cfg.keypoints, cfg.scale_set,
                                                   scale_aware=cfg.attention == "ssda",
                                                   shared_head_offsets=cfg.shared_head_offsets)
        self.norm2 = nn.LayerNorm(c)
        self.ffn = nn.Sequential(nn.Linear(c, 2 * c), nn.ReLU(inplace=True), nn.Linear(2 * c, c))
        self.norm3 = nn.LayerNorm(c)

    def forward(self, q: Tensor, positions: Tensor, feat_v: Tensor, feat_d: Tensor):
        qp = q + sine_encoding(positions, q.shape[-1])
        q = self.norm1(q + self.self_attn(qp, qp, q, need_weights=False)[0])
        out = self.cross(q, positions, feat_v, feat_d)
        q = self.norm2(out.features)
        q = self.norm3(q + self.ffn(q))
        return q, out


def read_dmap(dense_depth: Tensor, centers_px: Tensor) -> Tensor:
    """Bilinear lookup of the dense depth [B, 1, h, w] at pixel centers [B, N, 2] -> [B, N]."""
    cells = centers_px / STRIDE - 0.5
    return bilinear_sample(dense_depth, cells).squeeze(-1)


@dataclass
class Predictions:
    blocks: List[Dict[str, Tensor]]
    dense_depth: Tensor
    feature_size: Tuple[int, int]

    @property
    def final(self) -> Dict[str, Tensor]:
        return self.blocks[-1]


class MonoDetector(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c, h, w = cfg.channels, *cfg.feature_size
        self.backbone = Backbone(cfg.in_channels, c)
        self.visual_encoder = Encoder(c, cfg.heads, cfg.encoder_blocks)
        self.depth_encoder = Encoder(c, cfg.heads, cfg.encoder_blocks)
        self.dense_depth_head = nn.Conv2d(c, 1, 1)
        self.query_feat = nn.Parameter(torch.randn(cfg.queries, c) * 0.02)
        self.query_pos_logit = nn.Parameter(torch.logit(initial_query_positions(cfg.queries, h, w)))
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.decoder_blocks))
        n_cls = len(cfg.class_names)
        self.class_head = nn.Linear(c, n_cls)
        self.box_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(inplace=True), nn.Linear(c, 6))
        self.dims_head = nn.Linear(c, 3)
        self.angle_head = nn.Linear(c, 2)
        self.depth_head = nn.Linear(c, 2)
        self.register_buffer("mean_dims", torch.tensor([MEAN_DIMS[n] for n in cfg.class_names]).mean(0))
        self._init_heads()

    def _init_heads(self):
        nn.init.constant_(self.class_head.bias, -math.log(99.0))
        nn.init.zeros_(self.box_head[-1].weight)
        with torch.no_grad():
            self.box_head[-1].bias.copy_(torch.tensor([0.0, 0.0, -3.0, -3.0, -2.0, -2.0]))
        # small but nonzero so the depth encoder is trained from the first step
        nn.init.normal_(self.dense_depth_head.weight, std=1e-3)
        nn.init.constant_(self.dense_depth_head.bias, math.log(15.0))
        nn.init.zeros_(self.depth_head.bias)

    def zero_heads(self):
        """Zero every head's final layer (initialization sanity checks)."""
        for lin in (self.class_head, self.box_head[-1], self.dims_head, self.angle_head,
                    self.depth_head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        for blk in self.blocks:
            blk.cross.reset_parameters(zero_heads=True)

    def encoders_forward(self, base: Tensor):
        feat_v = self.visual_encoder(base)
        feat_d = self.depth_encoder(base)
        dense = self.dense_depth_head(feat_d).clamp(-10, 10).exp()
        return feat_v, feat_d, dense

    def heads(self, q: Tensor, positions: Tensor, dense: Tensor, focal: Tensor) -> Dict[str, Tensor]:
        img_w, img_h = self.cfg.image_size
        box = self.box_head(q)
        center = torch.sigmoid(torch.logit(positions.clamp(1e-4, 1 - 1e-4)) + box[..., :2])
        ltrb = torch.sigmoid(box[..., 2:])
        dims = self.mean_dims + self.dims_head(q)
        depth_raw = self.depth_head(q)
        d_reg = (depth_raw[..., 0].clamp(-10, 10) + math.log(15.0)).exp()
        log_sigma = depth_raw[..., 1].clamp(-10, 10)
        t_plus_b = (ltrb[..., 2] + ltrb[..., 3]) * img_h
        d_geo = depth_geo(focal[:, None], dims[..., 0].clamp(min=0.1), t_plus_b)
        centers_px = center * center.new_tensor([img_w, img_h])
        d_map = read_dmap(dense, centers_px)
        return {
            "logits": self.class_head(q), "center": center, "ltrb": ltrb, "dims": dims,
            "angle": self.angle_head(q), "d_reg": d_reg, "d_geo": d_geo, "d_map": d_map,
            "d_pre": depth_fuse(d_reg, d_geo, d_map), "log_sigma": log_sigma,
        }

    def decoder_forward(self, feat_v: Tensor, feat_d: Tensor, dense: Tensor,
                        focal: Tensor) -> List[Dict[str, Tensor]]:
        b = feat_v.shape[0]
        q = self.query_feat.unsqueeze(0).expand(b, -1, -1)
        positions = torch.sigmoid(self.query_pos_logit).unsqueeze(0).expand(b, -1, -1)
        outputs = []
        for blk in self.blocks:
            q, ssda_out = blk(q, positions, feat_v, feat_d)
            out = self.heads(q, positions, dense, focal)
            out.update(probs=ssda_out.probs, offsets=ssda_out.offsets,
                       attention=ssda_out.attention, positions=positions)
            outputs.append(out)
            if self.cfg.refine_positions:
                positions = out["center"].detach()
        return outputs

    def forward(self, images: Tensor, focal) -> Predictions:
        focal = torch.as_tensor(focal, dtype=images.dtype, device=images.device).reshape(-1)
        if focal.numel() == 1:
            focal = focal.expand(images.shape[0])
        base = self.backbone(images)
        feat_v, feat_d, dense = self.encoders_forward(base)
        blocks = self.decoder_forward(feat_v, feat_d, dense, focal)
        return Predictions(blocks, dense, tuple(base.shape[-2:]))


def save_checkpoint(path, model: MonoDetector, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": model.cfg.to_text(), "state_dict": model.state_dict(),
                "extra": extra or {}}, path)
    return path


def load_checkpoint(path, expect: Optional[ModelConfig] = None):
    """Load ``(model, extra)``; rejects unknown formats and shape mismatches."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig.from_text(blob["config"])
    if expect is not None and expect != cfg:
        raise ValueError(f"{path}: checkpoint config does not match the requested model config")
    model = MonoDetector(cfg)
    model.load_state_dict(blob["state_dict"], strict=True)
    model.eval()
    return model, blob.get("extra", {})
