"""One cascade stage of instance-query box refinement.

Pools a 7x7 RoI grid per proposal from the pyramid, lets the instance queries
attend to each other, mixes the RoI grid into each query with weights
generated from that query, and predicts a person logit plus box deltas.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, NumericError, ShapeError
from .geometry import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, clip_boxes, multilevel_roi_align

# keeps exp() of size deltas finite
DELTA_SCALE_CLAMP = math.log(1000.0 / 16)


class QuerySelfAttention(nn.Module):
    """Multi-head self-attention over a set of queries, residual + LayerNorm.

    Input ``(B, L, d)``; attention never crosses the batch dimension.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dimension {dim} not divisible by {heads} heads")
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)

    def forward(self, q: torch.Tensor):
        out, weights = self.attn(q, q, q, need_weights=True, average_attn_weights=False)
        return self.norm(q + out), weights


class DynamicChannelMLP(nn.Module):
    """Per-instance two-layer channel mixing whose weights come from the query."""

    def __init__(self, dim: int = 256, dynamic_dim: int = 64, pool_size: int = 7):
        super().__init__()
        self.dim = dim
        self.dynamic_dim = dynamic_dim
        self.num_params = dim * dynamic_dim
        self.generator = nn.Linear(dim, 2 * self.num_params)
        self.norm1 = nn.LayerNorm(dynamic_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.act = nn.ReLU(inplace=False)
        self.out_proj = nn.Linear(dim * pool_size**2, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.fuse_norm = nn.LayerNorm(dim)

    def interact(self, q: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
        """q ``(R, d)``, roi ``(R, d, h, w)`` -> ``(R, d)`` interaction features."""
        if q.shape[0] != roi.shape[0]:
            raise ShapeError(f"{q.shape[0]} queries but {roi.shape[0]} RoI grids")
        R = q.shape[0]
        feats = roi.flatten(2).transpose(1, 2)  # (R, hw, d)
        params = self.generator(q)
        w1 = params[:, : self.num_params].view(R, self.dim, self.dynamic_dim)
        w2 = params[:, self.num_params :].view(R, self.dynamic_dim, self.dim)
        x = self.act(self.norm1(torch.bmm(feats, w1)))
        x = self.act(self.norm2(torch.bmm(x, w2)))
        return self.act(self.norm3(self.out_proj(x.flatten(1))))

    def forward(self, q: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
        return self.fuse_norm(q + self.interact(q, roi))


def apply_box_delta(deltas: torch.Tensor, boxes: torch.Tensor, width=None, height=None) -> torch.Tensor:
    """Shift the centre by ``(dx*w, dy*h)`` and scale the size by ``exp(dw), exp(dh)``.

    Clipped to the image when ``width``/``height`` are given.
    """
    if not torch.isfinite(deltas).all():
        raise NumericError("non-finite box delta", term="box_delta")
    cx, cy, w, h = box_xyxy_to_cxcywh(boxes).unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    dw = dw.clamp(max=DELTA_SCALE_CLAMP)
    dh = dh.clamp(max=DELTA_SCALE_CLAMP)
    out = box_cxcywh_to_xyxy(torch.stack([cx + dx * w, cy + dy * h, w * dw.exp(), h * dh.exp()], -1))
    if width is not None:
        out = clip_boxes(out, width, height)
    return out


@dataclass
class StageBoxOutput:
    boxes: torch.Tensor      # (B, N, 4)
    logits: torch.Tensor     # (B, N)
    queries: torch.Tensor    # (B, N, d)
    attention: torch.Tensor  # (B, heads, N, N)


class BoxStage(nn.Module):
    def __init__(self, dim=256, heads=8, dynamic_dim=64, pool_size=7, prior_prob=0.01, sampling_ratio=2):
        super().__init__()
        self.pool_size = pool_size
        self.sampling_ratio = sampling_ratio
        self.self_attn = QuerySelfAttention(dim, heads)
        self.interaction = DynamicChannelMLP(dim, dynamic_dim, pool_size)
        self.cls_head = nn.Linear(dim, 1)
        self.box_head = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(inplace=True),
            nn.Linear(dim, dim), nn.ReLU(inplace=True),
            nn.Linear(dim, 4),
        )
        nn.init.constant_(self.cls_head.bias, -math.log((1 - prior_prob) / prior_prob))
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)

    def forward(self, pyramid, boxes: torch.Tensor, queries: torch.Tensor, image_sizes: torch.Tensor) -> StageBoxOutput:
        """pyramid: P2..P5; boxes ``(B, N, 4)``; queries ``(B, N, d)``; image_sizes ``(B, 2)`` as (h, w)."""
        B, N = boxes.shape[:2]
        if queries.shape[:2] != (B, N):
            raise ShapeError(f"queries {tuple(queries.shape)} do not align with boxes {tuple(boxes.shape)}")
        batch_index = torch.arange(B, device=boxes.device).repeat_interleave(N)
        roi = multilevel_roi_align(pyramid, boxes.reshape(B * N, 4), batch_index,
                                   (self.pool_size, self.pool_size), sampling_ratio=self.sampling_ratio)
        q, attn = self.self_attn(queries)
        q = self.interaction(q.reshape(B * N, -1), roi).view(B, N, -1)
        logits = self.cls_head(q).squeeze(-1)
        deltas = self.box_head(q)
        h = image_sizes[:, 0].to(boxes.dtype)[:, None]
        w = image_sizes[:, 1].to(boxes.dtype)[:, None]
        new_boxes = apply_box_delta(deltas, boxes, w, h)
        return StageBoxOutput(new_boxes, logits, q, attn)
