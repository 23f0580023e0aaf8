"""Synthetic stick-figure scenes and COCO keypoint ingestion.

Synthetic scenes use the COCO 17-keypoint topology. Randomness comes from
numpy's Philox counter-based generator keyed by ``(seed, index)``, so a scene
depends only on those two numbers, on any platform.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .config import SyntheticConfig
from .errors import ConfigurationError, DataError
from .geometry import COCO_SKELETON, OCCLUDED, VISIBLE

NUM_KEYPOINTS = 17


@dataclass
class SceneAnnotation:
    boxes: np.ndarray        # (G, 4) corner form, pixels
    keypoints: np.ndarray    # (G, K, 2)
    visibility: np.ndarray   # (G, K) in {0, 1, 2}
    areas: np.ndarray        # (G,)

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def empty(cls, num_keypoints: int = NUM_KEYPOINTS):
        return cls(np.zeros((0, 4)), np.zeros((0, num_keypoints, 2)),
                   np.zeros((0, num_keypoints), dtype=np.int64), np.zeros(0))


@dataclass
class Sample:
    image: np.ndarray            # (H, W, 3) uint8
    annotation: SceneAnnotation
    image_id: Any = None
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# synthetic scenes

# distinct colour per keypoint; left side warm, right side cool
KEYPOINT_COLORS = [
    (255, 255, 255), (255, 80, 80), (80, 160, 255), (255, 140, 0), (0, 200, 255),
    (255, 0, 0), (0, 0, 255), (255, 200, 0), (0, 255, 200), (255, 0, 200), (120, 0, 255),
    (200, 60, 0), (0, 120, 120), (160, 255, 0), (0, 255, 100), (255, 120, 160), (100, 180, 255),
]
LIMB_COLORS = {
    (5, 7): (230, 90, 90), (7, 9): (240, 160, 60), (6, 8): (90, 90, 230), (8, 10): (60, 170, 240),
    (11, 13): (200, 200, 50), (13, 15): (220, 120, 40), (12, 14): (50, 200, 200), (14, 16): (40, 120, 220),
    (5, 6): (180, 180, 180), (11, 12): (150, 150, 150), (5, 11): (210, 110, 160), (6, 12): (110, 160, 210),
}


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), int(index)]))


def _rot(v, angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def sample_figure(rng: np.random.Generator, height: float) -> tuple[np.ndarray, float]:
    """Keypoints ``(17, 2)`` of one articulated figure around the origin, and its head radius."""
    h = height
    tilt = rng.normal(0.0, 0.12)
    up = _rot(np.array([0.0, -1.0]), tilt)
    right = np.array([-up[1], up[0]])
    if rng.random() < 0.5:  # facing away swaps the image-side of left/right
        right = -right
    hip_c = np.zeros(2)
    neck = hip_c + up * 0.30 * h
    kp = np.zeros((17, 2))
    kp[5] = neck - right * 0.11 * h
    kp[6] = neck + right * 0.11 * h
    kp[11] = hip_c - right * 0.075 * h
    kp[12] = hip_c + right * 0.075 * h
    head_r = 0.065 * h
    nose = neck + up * 0.13 * h + right * rng.normal(0, 0.01) * h
    kp[0] = nose
    kp[1] = nose + up * 0.025 * h - right * 0.025 * h
    kp[2] = nose + up * 0.025 * h + right * 0.025 * h
    kp[3] = nose + up * 0.01 * h - right * 0.055 * h
    kp[4] = nose + up * 0.01 * h + right * 0.055 * h
    down = -up
    # rotating ``down`` by a positive angle swings toward image-left
    for sh, el, wr in ((5, 7, 9), (6, 8, 10)):
        out = -np.sign(kp[sh][0] - neck[0]) or 1.0
        a_upper = out * rng.uniform(0.1, 1.9)
        a_fore = a_upper + out * rng.uniform(-0.3, 1.6)
        kp[el] = kp[sh] + _rot(down, a_upper) * 0.15 * h
        kp[wr] = kp[el] + _rot(down, a_fore) * 0.14 * h
    for hp, kn, an in ((11, 13, 15), (12, 14, 16)):
        out = -np.sign(kp[hp][0] - hip_c[0]) or 1.0
        a_thigh = out * rng.uniform(-0.1, 0.55)
        a_shin = a_thigh + rng.uniform(-0.5, 0.5)
        kp[kn] = kp[hp] + _rot(down, a_thigh) * 0.23 * h
        kp[an] = kp[kn] + _rot(down, a_shin) * 0.22 * h
    return kp, head_r


def _background(rng: np.random.Generator, H: int, W: int, clutter: int) -> Image.Image:
    base = rng.uniform(40, 120, size=3)
    coarse = rng.normal(0, 18, size=(max(H // 16, 2), max(W // 16, 2), 3))
    tex = np.asarray(Image.fromarray(np.clip(coarse + 128, 0, 255).astype(np.uint8)).resize((W, H), Image.BILINEAR),
                     dtype=np.float64) - 128
    fine = rng.normal(0, 6, size=(H, W, 3))
    img = Image.fromarray(np.clip(base + tex + fine, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for _ in range(clutter):
        x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
        w, h = rng.uniform(4, W / 4), rng.uniform(4, H / 4)
        col = tuple(int(c) for c in rng.uniform(30, 150, size=3))
        if rng.random() < 0.5:
            draw.rectangle([x0, y0, x0 + w, y0 + h], fill=col)
        else:
            draw.ellipse([x0, y0, x0 + w, y0 + h], fill=col)
    return img


def _draw_figure(draw: ImageDraw.ImageDraw, kp: np.ndarray, vis: np.ndarray, head_r: float, height: float):
    width = max(2, int(round(0.035 * height)))
    for a, b in COCO_SKELETON:
        if a <= 4 or b <= 4:
            continue
        col = LIMB_COLORS.get((a, b)) or LIMB_COLORS.get((b, a), (170, 170, 170))
        draw.line([tuple(kp[a]), tuple(kp[b])], fill=col, width=width)
    cx, cy = kp[0]
    draw.ellipse([cx - head_r, cy - head_r, cx + head_r, cy + head_r], fill=(225, 190, 160))
    r = max(1.5, 0.022 * height)
    for k in range(NUM_KEYPOINTS):
        if vis[k] != VISIBLE:
            continue
        rk = r * (0.6 if k <= 4 else 1.0)
        x, y = kp[k]
        draw.ellipse([x - rk, y - rk, x + rk, y + rk], fill=KEYPOINT_COLORS[k])


def generate_scene(cfg: SyntheticConfig, index: int) -> Sample:
    """Render scene ``index`` of the configured synthetic dataset."""
    H, W = cfg.image_size
    if cfg.scale[1] > 0.9:
        raise ConfigurationError("synthetic figure scale must stay below 0.9 of the image height")
    rng = scene_rng(cfg.seed, index)
    img = _background(rng, H, W, cfg.clutter)
    draw = ImageDraw.Draw(img)
    n = int(rng.integers(cfg.persons[0], cfg.persons[1] + 1))
    boxes, kps, viss = [], [], []
    for _ in range(n):
        height = rng.uniform(*cfg.scale) * H
        kp, head_r = sample_figure(rng, height)
        margin = 0.06 * height
        lo = np.minimum(kp.min(0), kp[0] - head_r) - margin
        hi = np.maximum(kp.max(0), kp[0] + head_r) + margin
        size = hi - lo
        if size[0] >= W or size[1] >= H:
            raise ConfigurationError(f"figure of size {size.round(1)} does not fit a {W}x{H} image")
        offset = np.array([rng.uniform(-lo[0], W - hi[0]), rng.uniform(-lo[1], H - hi[1])])
        kp = kp + offset
        vis = np.full(NUM_KEYPOINTS, VISIBLE, dtype=np.int64)
        if cfg.occlusion_prob > 0:
            vis[rng.random(NUM_KEYPOINTS) < cfg.occlusion_prob] = OCCLUDED
        _draw_figure(draw, kp, vis, head_r, height)
        boxes.append(np.concatenate([lo + offset, hi + offset]))
        kps.append(kp)
        viss.append(vis)
    boxes = np.stack(boxes)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    ann = SceneAnnotation(boxes, np.stack(kps), np.stack(viss), areas)
    return Sample(np.asarray(img, dtype=np.uint8).copy(), ann, image_id=index)


class SyntheticDataset(Sequence):
    """Lazily generated, cached list of synthetic scenes."""

    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        self._cache: dict[int, Sample] = {}

    def __len__(self):
        return self.cfg.num_images

    def __getitem__(self, index):
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = generate_scene(self.cfg, index)
        return self._cache[index]


# ---------------------------------------------------------------------------
# COCO keypoint files

def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_coco_keypoints(annotation_path, image_root, category_id: Optional[int] = None) -> list[Sample]:
    """Parse a COCO person-keypoint JSON into samples.

    Crowd annotations are skipped. Boxes are converted from ``xywh`` to
    corners; ``v=0`` keypoints stay unlabeled.
    """
    annotation_path = Path(annotation_path)
    image_root = Path(image_root)
    try:
        data = json.loads(annotation_path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"annotation file not found: {annotation_path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {annotation_path}: {exc}") from exc
    if not isinstance(data, dict) or "images" not in data or "annotations" not in data:
        raise DataError(f"{annotation_path}: missing 'images' or 'annotations'")

    per_image: dict[Any, list] = {img["id"]: [] for img in data["images"]}
    for ann in data["annotations"]:
        if ann.get("iscrowd", 0):
            continue
        if category_id is not None and ann.get("category_id") != category_id:
            continue
        if ann.get("image_id") not in per_image:
            raise DataError("annotation refers to unknown image", ann.get("id"))
        per_image[ann["image_id"]].append(ann)

    samples = []
    for img in data["images"]:
        path = image_root / img["file_name"]
        if not path.is_file():
            raise DataError(f"missing image file {path}", img["id"])
        image = _read_image(path)
        boxes, kps, vis, areas = [], [], [], []
        for ann in per_image[img["id"]]:
            raw = ann.get("keypoints")
            if raw is None or len(raw) != 3 * NUM_KEYPOINTS:
                raise DataError(f"expected {NUM_KEYPOINTS} keypoint triplets", ann.get("id"))
            try:
                x, y, w, h = (float(v) for v in ann["bbox"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"bad bbox: {exc}", ann.get("id")) from exc
            if w <= 0 or h <= 0:
                raise DataError("degenerate bbox", ann.get("id"))
            trip = np.asarray(raw, dtype=np.float64).reshape(NUM_KEYPOINTS, 3)
            boxes.append([x, y, x + w, y + h])
            kps.append(trip[:, :2])
            vis.append(trip[:, 2].astype(np.int64))
            areas.append(float(ann.get("area", w * h)))
        if boxes:
            annotation = SceneAnnotation(np.asarray(boxes), np.stack(kps), np.stack(vis), np.asarray(areas))
        else:
            annotation = SceneAnnotation.empty()
        samples.append(Sample(image, annotation, image_id=img["id"], meta={"file_name": img["file_name"]}))
    return samples


def write_coco_results(predictions, image_ids, path) -> list[dict]:
    """Dump per-image pose lists as a COCO keypoint results list."""
    results = []
    for image_id, poses in zip(image_ids, predictions):
        results.extend(p.to_coco(image_id) for p in poses)
    Path(path).write_text(json.dumps(results))
    return results
