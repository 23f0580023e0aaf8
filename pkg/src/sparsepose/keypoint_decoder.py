"""One cascade stage of part-query keypoint regression.

Per instance: a 14x14 RoI grid from P2 is upsampled to 28x28 and squeezed into
M softmax-normalised spatial attention maps, one per body part. Each map pools
the upsampled grid into a part embedding; a sigmoid-gated blend folds the
embeddings into the running part queries, the parts attend to each other, and
a separate linear head per part regresses that part's keypoints.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .box_decoder import QuerySelfAttention
from .errors import ConfigurationError, ShapeError
from .geometry import roi_align

# COCO order: nose, eyes (L, R), ears (L, R), shoulders, elbows, wrists, hips, knees, ankles
HEAD = [0, 1, 2, 3, 4]

PART_SCHEMES = {
    "a": [[k] for k in range(17)],
    "b": [HEAD] + [[k] for k in range(5, 17)],
    # rigid groups: head, shoulders, hips, and the four lower limb segments
    "c": [HEAD, [5, 6], [11, 12], [7, 9], [8, 10], [13, 15], [14, 16]],
    # head and the four whole limbs
    "d": [HEAD, [5, 7, 9], [6, 8, 10], [11, 13, 15], [12, 14, 16]],
}


def part_division(scheme: str = "c", groups: Optional[Sequence[Sequence[int]]] = None,
                  num_keypoints: int = 17) -> list[list[int]]:
    """Partition of keypoint indices into parts.

    ``groups`` overrides the named scheme. Raises ConfigurationError unless the
    result covers every keypoint exactly once.
    """
    if groups is None:
        if scheme not in PART_SCHEMES:
            raise ConfigurationError(f"unknown part division scheme {scheme!r}")
        if num_keypoints != 17 and scheme != "a":
            raise ConfigurationError(f"scheme {scheme!r} is defined for 17 keypoints only")
        groups = PART_SCHEMES[scheme] if num_keypoints == 17 else [[k] for k in range(num_keypoints)]
    groups = [list(map(int, g)) for g in groups]
    flat = sorted(k for g in groups for k in g)
    if any(len(g) == 0 for g in groups) or flat != list(range(num_keypoints)):
        raise ConfigurationError(f"part groups {groups} do not partition {num_keypoints} keypoints")
    return groups


def _conv_relu(in_ch, out_ch):
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True))


class PartAttentionPooling(nn.Module):
    """RoI grid -> M part embeddings via spatial softmax attention.

    Returns embeddings ``(R, M, part_dim)`` and attention maps ``(R, M, 2h, 2w)``.
    """

    def __init__(self, in_dim=256, conv_dim=64, part_dim=128, num_parts=7):
        super().__init__()
        if num_parts <= 0:
            raise ConfigurationError("number of parts must be positive")
        self.num_parts = num_parts
        self.in_dim = in_dim
        self.tower = nn.Sequential(
            _conv_relu(in_dim, conv_dim),
            _conv_relu(conv_dim, conv_dim),
            nn.ConvTranspose2d(conv_dim, conv_dim, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.attn_logits = nn.Conv2d(conv_dim, num_parts, 3, padding=1)
        self.proj = nn.Linear(conv_dim, part_dim)

    def attention(self, feats: torch.Tensor) -> torch.Tensor:
        """Upsampled features ``(R, C, H, W)`` -> flattened maps ``(R, M, H*W)`` summing to 1."""
        return self.attn_logits(feats).flatten(2).softmax(-1)

    def pool(self, attn: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.bmm(attn, feats.flatten(2).transpose(1, 2)))

    def forward(self, roi: torch.Tensor):
        if roi.dim() != 4 or roi.shape[1] != self.in_dim:
            raise ConfigurationError(f"expected RoI grid (R, {self.in_dim}, h, w), got {tuple(roi.shape)}")
        feats = self.tower(roi)
        attn = self.attention(feats)
        emb = self.pool(attn, feats)
        return emb, attn.view(roi.shape[0], self.num_parts, *feats.shape[-2:])


class GatedPartUpdate(nn.Module):
    """Blend new part embeddings with the previous part queries.

    ``gated``: two sigmoid gates from an MLP over the sum weight each input.
    ``replace`` keeps only the new embeddings; ``sum`` adds both.
    """

    def __init__(self, dim=128, mode="gated"):
        super().__init__()
        if mode not in ("gated", "replace", "sum"):
            raise ConfigurationError(f"unknown part update mode {mode!r}")
        self.mode = mode
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(inplace=True), nn.Linear(dim, 2 * dim))
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def gates(self, prev: torch.Tensor, emb: torch.Tensor):
        g = torch.sigmoid(self.mlp(emb + prev))
        return g.chunk(2, dim=-1)  # (embedding gate, query gate)

    def forward(self, prev: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if prev.shape != emb.shape:
            raise ShapeError(f"part queries {tuple(prev.shape)} vs embeddings {tuple(emb.shape)}")
        if self.mode == "replace":
            return emb
        if self.mode == "sum":
            return emb + prev
        g_emb, g_prev = self.gates(prev, emb)
        return g_emb * emb + g_prev * prev


class PartKeypointHeads(nn.Module):
    """Non-shared linear head per part -> means and positive scales for its keypoints."""

    def __init__(self, part_dim: int, groups: Sequence[Sequence[int]]):
        super().__init__()
        self.groups = [list(g) for g in groups]
        self.num_keypoints = sum(len(g) for g in groups)
        self.heads = nn.ModuleList(nn.Linear(part_dim, 4 * len(g)) for g in self.groups)
        order = [k for g in self.groups for k in g]
        self.register_buffer("inverse", torch.argsort(torch.tensor(order)), persistent=False)

    def forward(self, parts: torch.Tensor):
        """parts ``(R, M, part_dim)`` -> ``mu, sigma`` each ``(R, K, 2)``."""
        if parts.shape[1] != len(self.heads):
            raise ConfigurationError(f"{parts.shape[1]} part queries for {len(self.heads)} heads")
        R = parts.shape[0]
        outs = [head(parts[:, m]).view(R, len(g), 4) for m, (head, g) in enumerate(zip(self.heads, self.groups))]
        out = torch.cat(outs, dim=1)[:, self.inverse]
        return out[..., :2], torch.sigmoid(out[..., 2:])


@dataclass
class StagePoseOutput:
    part_queries: torch.Tensor            # (B, N, M, part_dim)
    mu: torch.Tensor                      # (B, N, K, 2) box-normalised
    sigma: torch.Tensor                   # (B, N, K, 2) in (0, 1)
    attention_maps: torch.Tensor          # (B, N, M, 28, 28)
    part_attention: torch.Tensor          # (B*N, heads, M, M)
    instance_queries: Optional[torch.Tensor] = None  # (B, N, d) after write-back


class KeypointStage(nn.Module):
    def __init__(self, groups, in_dim=256, conv_dim=64, part_dim=128, heads=8, pool_size=14,
                 part_update="gated", instance_dim=256, sampling_ratio=2):
        super().__init__()
        self.groups = [list(g) for g in groups]
        self.pool_size = pool_size
        self.sampling_ratio = sampling_ratio
        self.pooling = PartAttentionPooling(in_dim, conv_dim, part_dim, len(self.groups))
        self.update = GatedPartUpdate(part_dim, part_update)
        self.self_attn = QuerySelfAttention(part_dim, heads)
        self.heads = PartKeypointHeads(part_dim, self.groups)
        # pooled part state written back into the instance query (serial iteration)
        self.to_instance = nn.Linear(part_dim, instance_dim)
        self.instance_norm = nn.LayerNorm(instance_dim)

    def forward(self, p2: torch.Tensor, boxes: torch.Tensor, part_queries: torch.Tensor,
                instance_queries: Optional[torch.Tensor] = None, stride: int = 4) -> StagePoseOutput:
        B, N = boxes.shape[:2]
        M = len(self.groups)
        if part_queries.shape[:3] != (B, N, M):
            raise ShapeError(f"part queries {tuple(part_queries.shape)} do not match ({B}, {N}, {M}, d)")
        batch_index = torch.arange(B, device=boxes.device).repeat_interleave(N)
        roi = roi_align(p2, boxes.reshape(B * N, 4), batch_index, (self.pool_size, self.pool_size),
                        1.0 / stride, self.sampling_ratio)
        emb, maps = self.pooling(roi)
        parts = self.update(part_queries.reshape(B * N, M, -1), emb)
        parts, part_attn = self.self_attn(parts)
        mu, sigma = self.heads(parts)
        K = mu.shape[1]
        new_instance = None
        if instance_queries is not None:
            pooled = self.to_instance(parts.mean(1)).view(B, N, -1)
            new_instance = self.instance_norm(instance_queries + pooled)
        return StagePoseOutput(
            parts.view(B, N, M, -1), mu.view(B, N, K, 2), sigma.view(B, N, K, 2),
            maps.view(B, N, M, *maps.shape[-2:]), part_attn, new_instance,
        )
