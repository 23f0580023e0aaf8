"""Skeleton and attention-map overlays for inspection."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import COCO_SKELETON


def draw_poses(image: np.ndarray, poses: Sequence, radius: int = 2) -> Image.Image:
    """Draw each pose's box, limbs and joints on a copy of ``image`` (H, W, 3 uint8)."""
    canvas = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for pose in poses:
        kp = np.asarray(pose.keypoints, dtype=np.float64)
        draw.rectangle([float(v) for v in pose.box], outline=(255, 255, 0))
        for a, b in COCO_SKELETON:
            draw.line([tuple(kp[a]), tuple(kp[b])], fill=(0, 255, 0), width=1)
        for x, y in kp:
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=(255, 0, 0))
        draw.text((float(pose.box[0]) + 2, float(pose.box[1]) + 2), f"{pose.score:.2f}", fill=(255, 255, 0))
    return canvas


def attention_overlay(image: np.ndarray, box, attention: np.ndarray, alpha: float = 0.6) -> Image.Image:
    """Blend a (h, w) attention map, stretched over ``box``, onto the image in red."""
    canvas = np.asarray(Image.fromarray(image).convert("RGB"), dtype=np.float64).copy()
    H, W = canvas.shape[:2]
    x0, y0, x1, y1 = (int(round(float(v))) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(max(x1, x0 + 1), W), min(max(y1, y0 + 1), H)
    if x1 <= x0 or y1 <= y0:
        return Image.fromarray(canvas.astype(np.uint8))
    peak = attention.max()
    heat = attention / peak if peak > 0 else attention
    heat_img = Image.fromarray((heat * 255).astype(np.uint8)).resize((x1 - x0, y1 - y0), Image.BILINEAR)
    h = np.asarray(heat_img, dtype=np.float64)[..., None] / 255.0
    red = np.zeros_like(canvas[y0:y1, x0:x1])
    red[..., 0] = 255
    region = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = region * (1 - alpha * h) + red * alpha * h
    draw = ImageDraw.Draw(out := Image.fromarray(canvas.astype(np.uint8)))
    draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=(255, 255, 0))
    return out
