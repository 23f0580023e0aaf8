"""Box, keypoint and similarity primitives.

Boxes are corner-form ``(x1, y1, x2, y2)`` tensors in image pixels. All
functions broadcast over leading dimensions unless noted.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidGeometryError

# COCO per-keypoint OKS constants; the COCO evaluator uses 2 * sigma.
COCO_SIGMAS = np.array(
    [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
) / 10.0
COCO_KAPPAS = 2.0 * COCO_SIGMAS

COCO_KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6),
    (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)

# COCO visibility flags
UNLABELED, OCCLUDED, VISIBLE = 0, 1, 2


def kappas_for(num_keypoints: int, default: float = 0.1) -> np.ndarray:
    if num_keypoints == len(COCO_KAPPAS):
        return COCO_KAPPAS.copy()
    return np.full(num_keypoints, default)


def check_boxes(boxes: torch.Tensor) -> None:
    if boxes.shape[-1] != 4:
        raise InvalidGeometryError(f"boxes must have 4 coordinates, got shape {tuple(boxes.shape)}")
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    if not torch.isfinite(boxes).all():
        raise InvalidGeometryError("non-finite box coordinates")
    if (w <= 0).any() or (h <= 0).any():
        raise InvalidGeometryError("degenerate box: requires x2 > x1 and y2 > y1")


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def _iou_and_hull(a: torch.Tensor, b: torch.Tensor):
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union
    hull_lt = torch.minimum(a[..., :2], b[..., :2])
    hull_rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull_wh = hull_rb - hull_lt
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return iou, union, hull


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _iou_and_hull(a, b)[0]


def giou(a: torch.Tensor, b: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Elementwise generalized IoU between broadcastable box tensors."""
    if check:
        check_boxes(a)
        check_boxes(b)
    iou, union, hull = _iou_and_hull(a, b)
    return iou - (hull - union) / hull


def pairwise_giou(a: torch.Tensor, b: torch.Tensor, check: bool = True) -> torch.Tensor:
    """``(N, 4) x (G, 4) -> (N, G)`` GIoU matrix."""
    return giou(a[:, None, :], b[None, :, :], check=check)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def clip_boxes(boxes: torch.Tensor, width, height, min_size: float = 1e-2) -> torch.Tensor:
    """Clip to ``[0, width] x [0, height]`` keeping at least ``min_size`` extent.

    ``width``/``height`` may be floats or tensors broadcastable to ``boxes[..., 0]``.
    """
    width = torch.as_tensor(width, dtype=boxes.dtype, device=boxes.device)
    height = torch.as_tensor(height, dtype=boxes.dtype, device=boxes.device)
    x1 = torch.minimum(boxes[..., 0].clamp(min=0), width - min_size)
    y1 = torch.minimum(boxes[..., 1].clamp(min=0), height - min_size)
    x2 = torch.maximum(torch.minimum(boxes[..., 2], width), x1 + min_size)
    y2 = torch.maximum(torch.minimum(boxes[..., 3], height), y1 + min_size)
    return torch.stack([x1, y1, x2, y2], dim=-1)


# ---------------------------------------------------------------------------
# RoIAlign

def _check_output_size(out_h: int, out_w: int) -> None:
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError(f"RoIAlign output size must be positive, got {out_h}x{out_w}")


def _restore_order(pieces, order):
    """Concatenate per-group results and put rows back in their original positions."""
    out = torch.cat(pieces) if len(pieces) > 1 else pieces[0]
    order = torch.cat(order)
    if bool((order[1:] > order[:-1]).all()):
        return out
    return out[torch.argsort(order)]


def roi_align(
    features: torch.Tensor,
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    out_size: tuple[int, int],
    spatial_scale: float = 1.0,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Average of bilinear samples per output bin, pixel-center aligned.

    features: ``(B, C, H, W)``; boxes: ``(R, 4)`` image coordinates;
    batch_index: ``(R,)`` long. Returns ``(R, C, out_h, out_w)``.

    Differentiable with respect to both ``features`` and ``boxes`` (torchvision's
    kernel does not propagate into box coordinates, hence this implementation).
    """
    out_h, out_w = out_size
    _check_output_size(out_h, out_w)
    if sampling_ratio <= 0:
        raise ConfigurationError("sampling_ratio must be positive")
    R = boxes.shape[0]
    C, H, W = features.shape[1:]
    if R == 0:
        return features.new_zeros((0, C, out_h, out_w))

    # box in feature coordinates, shifted so integer positions are pixel centers
    b = boxes * spatial_scale - 0.5
    x1, y1, x2, y2 = b.unbind(-1)
    bin_w = (x2 - x1) / out_w
    bin_h = (y2 - y1) / out_h

    s = sampling_ratio
    frac = (torch.arange(s, dtype=boxes.dtype, device=boxes.device) + 0.5) / s
    ix = torch.arange(out_w, dtype=boxes.dtype, device=boxes.device)[:, None] + frac[None, :]
    iy = torch.arange(out_h, dtype=boxes.dtype, device=boxes.device)[:, None] + frac[None, :]
    xs = x1[:, None, None] + bin_w[:, None, None] * ix[None]  # (R, out_w, s)
    ys = y1[:, None, None] + bin_h[:, None, None] * iy[None]  # (R, out_h, s)
    xs = xs.reshape(R, out_w * s)
    ys = ys.reshape(R, out_h * s)

    # samples beyond the border clamp to the edge value (boxes are pre-clipped)
    gx = (xs + 0.5) / W * 2 - 1
    gy = (ys + 0.5) / H * 2 - 1
    grid = torch.stack(
        [gx[:, None, :].expand(R, out_h * s, out_w * s), gy[:, :, None].expand(R, out_h * s, out_w * s)],
        dim=-1,
    )
    # sample each image once with all of its RoIs stacked along the grid height
    pieces, order = [], []
    for img in torch.unique(batch_index).tolist():
        idx = torch.nonzero(batch_index == img, as_tuple=True)[0]
        g = grid[idx].reshape(1, idx.numel() * out_h * s, out_w * s, 2)
        out = F.grid_sample(features[img : img + 1], g, mode="bilinear", padding_mode="border", align_corners=False)
        out = F.avg_pool2d(out, s) if s > 1 else out
        pieces.append(out.view(C, idx.numel(), out_h, out_w).transpose(0, 1))
        order.append(idx)
    return _restore_order(pieces, order)


def fpn_levels(boxes: torch.Tensor, min_level: int = 2, max_level: int = 5,
               canonical_size: float = 224.0, canonical_level: int = 4) -> torch.Tensor:
    """Pyramid level per box: ``floor(4 + log2(sqrt(area) / 224))`` clamped."""
    size = box_area(boxes).clamp(min=1e-8).sqrt()
    level = torch.floor(canonical_level + torch.log2(size / canonical_size + 1e-8))
    return level.clamp(min_level, max_level).long()


def multilevel_roi_align(
    pyramid: Sequence[torch.Tensor],
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    out_size: tuple[int, int],
    strides: Sequence[int] = (4, 8, 16, 32),
    sampling_ratio: int = 2,
) -> torch.Tensor:
    levels = fpn_levels(boxes.detach()) - 2
    pieces, order = [], []
    for i, (feat, stride) in enumerate(zip(pyramid, strides)):
        idx = torch.nonzero(levels == i, as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        pieces.append(roi_align(feat, boxes[idx], batch_index[idx], out_size, 1.0 / stride, sampling_ratio))
        order.append(idx)
    if not pieces:
        return boxes.new_zeros((0, pyramid[0].shape[1], *out_size))
    return _restore_order(pieces, order)


# ---------------------------------------------------------------------------
# keypoints

def normalize_keypoints(keypoints: torch.Tensor, visibility: torch.Tensor, boxes: torch.Tensor):
    """Map keypoints into box-relative coordinates centred on the box.

    keypoints ``(..., K, 2)``, visibility ``(..., K)``, boxes ``(..., 4)``.
    Returns ``(coords, mask)``; mask is true only for labeled keypoints
    strictly inside the box, so every unmasked coordinate is in (-0.5, 0.5).
    """
    lo = boxes[..., None, :2]
    size = boxes[..., None, 2:] - lo
    coords = (keypoints - lo) / size - 0.5
    inside = (coords > -0.5).all(-1) & (coords < 0.5).all(-1)
    mask = inside & (visibility > 0)
    return coords, mask


def denormalize_keypoints(coords: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    lo = boxes[..., None, :2]
    size = boxes[..., None, 2:] - lo
    return (coords + 0.5) * size + lo


def oks(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray, area: float,
        kappas: Optional[np.ndarray] = None) -> Optional[float]:
    """Object keypoint similarity; ``None`` when the ground truth has no labeled keypoint."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    labeled = np.asarray(visibility) > 0
    if not labeled.any():
        return None
    if kappas is None:
        kappas = kappas_for(gt.shape[0])
    d2 = ((pred - gt) ** 2).sum(-1)
    e = d2 / (2.0 * area * np.asarray(kappas) ** 2 + np.spacing(1))
    return float(np.exp(-e)[labeled].mean())


def oks_matrix(preds: np.ndarray, gts: np.ndarray, visibility: np.ndarray, areas: np.ndarray,
               kappas: Optional[np.ndarray] = None) -> np.ndarray:
    """``(D, K, 2) x (G, K, 2) -> (D, G)``; columns of unlabeled ground truth are 0."""
    preds = np.asarray(preds, dtype=np.float64).reshape(len(preds), -1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(len(gts), -1, 2)
    if kappas is None:
        kappas = kappas_for(gts.shape[1] if len(gts) else preds.shape[1])
    labeled = np.asarray(visibility).reshape(len(gts), -1) > 0
    d2 = ((preds[:, None] - gts[None]) ** 2).sum(-1)  # (D, G, K)
    denom = 2.0 * np.asarray(areas, dtype=np.float64)[None, :, None] * np.asarray(kappas)[None, None] ** 2
    sim = np.exp(-d2 / (denom + np.spacing(1)))
    count = labeled.sum(-1)
    total = (sim * labeled[None]).sum(-1)
    return np.where(count[None] > 0, total / np.maximum(count[None], 1), 0.0)
