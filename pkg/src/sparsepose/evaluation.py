"""OKS-based average precision / recall in the COCO keypoint protocol.

Per image, detections are sorted by score (ties keep insertion order) and
greedily matched highest-score-first to the unmatched ground truth with the
largest OKS at or above each threshold. Precision is the monotone envelope
sampled at 101 recall points.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .geometry import kappas_for, oks_matrix

OKS_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "medium": (32.0**2, 96.0**2), "large": (96.0**2, 1e10)}
METRIC_NAMES = ("AP", "AP50", "AP75", "AP_M", "AP_L", "AR")


def _pose_arrays(preds):
    """Accepts ScoredPose objects or ``(keypoints, score)`` pairs."""
    kps, scores, areas = [], [], []
    for p in preds:
        if hasattr(p, "keypoints"):
            k, s = np.asarray(p.keypoints, dtype=np.float64), float(p.score)
        else:
            k, s = np.asarray(p[0], dtype=np.float64), float(p[1])
        kps.append(k)
        scores.append(s)
        ext = k.max(0) - k.min(0)
        areas.append(ext[0] * ext[1])
    return kps, np.asarray(scores), np.asarray(areas)


def _evaluate_image(preds, ann, area_rng, max_dets, kappas):
    kps, scores, det_areas = _pose_arrays(preds)
    order = np.argsort(-scores, kind="mergesort")[:max_dets]
    scores = scores[order]
    det_areas = det_areas[order]
    G = len(ann)
    labeled = (np.asarray(ann.visibility).reshape(G, -1) > 0) if G else np.zeros((0, 0), bool)
    gt_areas = np.asarray(ann.areas, dtype=np.float64)
    gt_ignore = ~labeled.any(-1) | (gt_areas < area_rng[0]) | (gt_areas > area_rng[1]) if G else np.zeros(0, bool)
    gt_order = np.argsort(gt_ignore, kind="mergesort")
    gt_ignore = gt_ignore[gt_order]
    D, T = len(order), len(OKS_THRESHOLDS)
    if D and G:
        ious = oks_matrix(np.stack([kps[i] for i in order]), np.asarray(ann.keypoints)[gt_order],
                          np.asarray(ann.visibility)[gt_order], gt_areas[gt_order], kappas)
    else:
        ious = np.zeros((D, G))
    det_match = -np.ones((T, D), dtype=np.int64)
    det_ignore = np.zeros((T, D), dtype=bool)
    for t, thr in enumerate(OKS_THRESHOLDS):
        gt_match = -np.ones(G, dtype=np.int64)
        for d in range(D):
            best = min(thr, 1 - 1e-10)
            m = -1
            for g in range(G):
                if gt_match[g] >= 0:
                    continue
                # a real match is never traded for an ignored one
                if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                    break
                if ious[d, g] < best:
                    continue
                best = ious[d, g]
                m = g
            if m == -1:
                continue
            det_ignore[t, d] = gt_ignore[m]
            det_match[t, d] = m
            gt_match[m] = d
    outside = (det_areas < area_rng[0]) | (det_areas > area_rng[1])
    det_ignore |= (det_match == -1) & outside[None]
    return scores, det_match, det_ignore, int((~gt_ignore).sum())


def _accumulate(per_image):
    T = len(OKS_THRESHOLDS)
    num_gt = sum(r[3] for r in per_image)
    if num_gt == 0:
        return None, None
    scores = np.concatenate([r[0] for r in per_image]) if per_image else np.zeros(0)
    match = np.concatenate([r[1] for r in per_image], axis=1) if per_image else np.zeros((T, 0))
    ignore = np.concatenate([r[2] for r in per_image], axis=1) if per_image else np.zeros((T, 0), bool)
    order = np.argsort(-scores, kind="mergesort")
    match, ignore = match[:, order], ignore[:, order]
    precision = np.zeros((T, len(RECALL_POINTS)))
    recall = np.zeros(T)
    for t in range(T):
        tp = np.cumsum((match[t] >= 0) & ~ignore[t]).astype(np.float64)
        fp = np.cumsum((match[t] < 0) & ~ignore[t]).astype(np.float64)
        if len(tp) == 0:
            continue
        rc = tp / num_gt
        pr = tp / np.maximum(tp + fp, np.spacing(1))
        recall[t] = rc[-1]
        for i in range(len(pr) - 1, 0, -1):
            pr[i - 1] = max(pr[i - 1], pr[i])
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        valid = idx < len(pr)
        precision[t, valid] = pr[idx[valid]]
    return precision, recall


def evaluate_ap(predictions: Sequence[Sequence], annotations: Sequence, max_dets: int = 20,
                kappas: Optional[np.ndarray] = None) -> dict:
    """Metrics ``AP, AP50, AP75, AP_M, AP_L, AR``; ``None`` where there is no ground truth.

    ``predictions[i]`` lists the poses predicted for image ``i`` and
    ``annotations[i]`` is its SceneAnnotation.
    """
    if len(predictions) != len(annotations):
        raise ValueError("predictions and annotations must cover the same images")
    if kappas is None:
        K = next((np.asarray(a.keypoints).shape[1] for a in annotations if len(a)), 17)
        kappas = kappas_for(K)
    results = {}
    t50 = int(np.argmin(np.abs(OKS_THRESHOLDS - 0.5)))
    t75 = int(np.argmin(np.abs(OKS_THRESHOLDS - 0.75)))
    for name, rng in AREA_RANGES.items():
        per_image = [_evaluate_image(p, a, rng, max_dets, kappas) for p, a in zip(predictions, annotations)]
        precision, recall = _accumulate(per_image)
        if precision is None:
            stats = dict(AP=None, AP50=None, AP75=None, AR=None)
        else:
            ap = precision.mean(-1)
            stats = dict(AP=float(ap.mean()), AP50=float(ap[t50]), AP75=float(ap[t75]), AR=float(recall.mean()))
        if name == "all":
            results.update(stats)
        elif name == "medium":
            results["AP_M"] = stats["AP"]
        else:
            results["AP_L"] = stats["AP"]
    return {k: results[k] for k in METRIC_NAMES}


def ground_truth_as_predictions(annotations) -> list[list[tuple]]:
    """Replay each labeled ground-truth pose as a score-1 prediction."""
    out = []
    for ann in annotations:
        out.append([(np.asarray(k), 1.0) for k in np.asarray(ann.keypoints)])
    return out
