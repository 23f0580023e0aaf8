"""Bipartite assignment and the per-stage set losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import LossConfig
from .errors import DataError, NumericError
from .geometry import check_boxes, giou, normalize_keypoints, pairwise_giou
from .rle_flow import CouplingFlow, rle_loss


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise sigmoid focal loss."""
    targets = targets.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def _box_scale(image_size, like: torch.Tensor) -> torch.Tensor:
    h, w = (float(v) for v in image_size)
    return like.new_tensor([w, h, w, h])


@torch.no_grad()
def cost_matrix(logits, boxes, gt_boxes, image_size, weights: LossConfig,
                keypoint_cost: torch.Tensor | None = None) -> torch.Tensor:
    """``(N,)`` logits, ``(N, 4)`` boxes, ``(G, 4)`` targets -> ``(N, G)`` matching cost.

    Classification uses the focal loss of calling the prediction a person,
    boxes an L1 on image-normalized corners plus negative GIoU.
    """
    if gt_boxes.numel():
        try:
            check_boxes(gt_boxes)
        except Exception as exc:
            raise DataError(f"invalid ground-truth box: {exc}") from exc
    # positive-class focal loss: near zero for a confident prediction
    cost_cls = focal_loss(logits, torch.ones_like(logits), weights.focal_alpha, weights.focal_gamma)[:, None]
    scale = _box_scale(image_size, boxes)
    cost_l1 = torch.cdist(boxes / scale, gt_boxes / scale, p=1)
    cost_giou = -pairwise_giou(boxes, gt_boxes, check=False)
    cost = weights.cls_weight * cost_cls + weights.l1_weight * cost_l1 + weights.giou_weight * cost_giou
    if keypoint_cost is not None and weights.match_keypoint_weight:
        cost = cost + weights.match_keypoint_weight * keypoint_cost
    return cost


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment as ``(prediction, target)`` pairs, sorted by prediction."""
    cost = np.asarray(cost.detach().cpu() if isinstance(cost, torch.Tensor) else cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise NumericError("matching cost matrix contains non-finite entries", term="matching")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


@dataclass
class Target:
    """Ground truth for one image (tensors, corner-form boxes)."""

    boxes: torch.Tensor        # (G, 4)
    keypoints: torch.Tensor    # (G, K, 2)
    visibility: torch.Tensor   # (G, K)
    image_size: tuple          # (h, w)

    def __len__(self):
        return self.boxes.shape[0]


def _keypoint_l1_cost(mu, pred_boxes, target: Target) -> torch.Tensor:
    # mean L1 in each prediction's box frame over labeled keypoints
    coords, _ = normalize_keypoints(target.keypoints[None], target.visibility[None], pred_boxes[:, None])
    labeled = (target.visibility > 0).to(mu.dtype)
    diff = (mu[:, None] - coords).abs().sum(-1)  # (N, G, K)
    return (diff * labeled[None]).sum(-1) / labeled.sum(-1).clamp(min=1)[None]


def stage_loss(logits, boxes, mu, sigma, targets: list[Target], flow: CouplingFlow,
               weights: LossConfig, flow_mode: str = "residual", pose_boxes=None) -> dict:
    """Matched set losses for one stage over a batch.

    logits ``(B, N)``, boxes ``(B, N, 4)``, mu/sigma ``(B, N, K, 2)``.
    ``pose_boxes`` are the boxes keypoint targets are normalized by (defaults
    to ``boxes``). Returns the unweighted terms, the weighted instance/part
    losses and the assignment per image.
    """
    if pose_boxes is None:
        pose_boxes = boxes
    B, N = logits.shape
    num_gt = sum(len(t) for t in targets)
    norm = float(max(num_gt, 1))
    cls_targets = torch.zeros_like(logits)
    l1 = logits.new_zeros(())
    giou_loss = logits.new_zeros(())
    kp_mu, kp_sigma, kp_target, kp_mask = [], [], [], []
    assignments = []
    for b, tgt in enumerate(targets):
        if len(tgt) == 0:
            assignments.append([])
            continue
        kp_cost = None
        if weights.match_keypoint_weight:
            kp_cost = _keypoint_l1_cost(mu[b].detach(), pose_boxes[b].detach(), tgt)
        cost = cost_matrix(logits[b].detach(), boxes[b].detach(), tgt.boxes, tgt.image_size, weights, kp_cost)
        pairs = hungarian(cost)
        assignments.append(pairs)
        src = torch.tensor([p for p, _ in pairs], dtype=torch.long)
        dst = torch.tensor([g for _, g in pairs], dtype=torch.long)
        cls_targets[b, src] = 1.0
        scale = _box_scale(tgt.image_size, boxes)
        l1 = l1 + (boxes[b, src] / scale - tgt.boxes[dst] / scale).abs().sum()
        giou_loss = giou_loss + (1 - giou(boxes[b, src], tgt.boxes[dst], check=False)).sum()
        coords, mask = normalize_keypoints(tgt.keypoints[dst], tgt.visibility[dst], pose_boxes[b, src])
        kp_mu.append(mu[b, src])
        kp_sigma.append(sigma[b, src])
        kp_target.append(coords)
        kp_mask.append(mask)

    cls = focal_loss(logits, cls_targets, weights.focal_alpha, weights.focal_gamma).sum() / norm
    l1 = l1 / norm
    giou_loss = giou_loss / norm
    if kp_mu:
        kp = rle_loss(torch.cat(kp_mu), torch.cat(kp_sigma), torch.cat(kp_target), torch.cat(kp_mask),
                      flow, flow_mode)
        kp_loss, supervised = kp.loss, kp.num_supervised
    else:
        kp_loss, supervised = mu.sum() * 0.0, 0
    instance = weights.cls_weight * cls + weights.l1_weight * l1 + weights.giou_weight * giou_loss
    part = weights.keypoint_weight * kp_loss
    return {
        "cls": cls, "l1": l1, "giou": giou_loss, "keypoint": kp_loss,
        "instance_loss": instance, "part_loss": part,
        "num_supervised": supervised, "assignments": assignments,
    }
