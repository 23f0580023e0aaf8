import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsepose.data import SceneAnnotation
from sparsepose.evaluation import METRIC_NAMES, evaluate_ap, ground_truth_as_predictions
from sparsepose.geometry import COCO_KAPPAS


def scene(num, seed=0, size=(60.0, 120.0), vis=2):
    rng = np.random.default_rng(seed)
    boxes, kps = [], []
    for _ in range(num):
        x, y = rng.uniform(0, 300, 2)
        w, h = size
        boxes.append([x, y, x + w, y + h])
        kps.append(np.stack([rng.uniform(x, x + w, 17), rng.uniform(y, y + h, 17)], -1))
    boxes = np.asarray(boxes).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return SceneAnnotation(boxes, np.asarray(kps).reshape(-1, 17, 2), np.full((num, 17), vis), areas)


def displaced(gt_kps, area, oks_value):
    """Pose whose OKS against ``gt_kps`` is exactly ``oks_value``: every term equals it."""
    t = -math.log(oks_value)
    d = COCO_KAPPAS * math.sqrt(2 * area * t)
    return gt_kps + np.stack([d, np.zeros(17)], -1)


def test_ground_truth_replay_is_perfect():
    anns = [scene(3, 0), scene(1, 1), scene(2, 2)]
    m = evaluate_ap(ground_truth_as_predictions(anns), anns)
    assert set(m) == set(METRIC_NAMES)
    assert m["AP"] == m["AP50"] == m["AP75"] == m["AR"] == 1.0


def test_no_predictions_is_zero():
    anns = [scene(2)]
    assert evaluate_ap([[]], anns)["AP"] == 0.0


def test_no_ground_truth_reports_no_score():
    empty = SceneAnnotation.empty()
    m = evaluate_ap([[(np.zeros((17, 2)), 0.9)]], [empty])
    assert all(v is None for v in m.values())


def test_hand_case_duplicate_after_match():
    # one gt, a perfect high-score pose and a far low-score duplicate
    ann = scene(1)
    gt = ann.keypoints[0]
    preds = [[(gt, 0.9), (gt + 500.0, 0.1)]]
    m = evaluate_ap(preds, [ann])
    assert m["AP50"] == 1.0 and m["AP"] == 1.0


def test_hand_case_false_positive_between_hits():
    # scores 0.9 hit, 0.8 miss, 0.7 hit over two gts: P/R = (1, .5), (.5, .5), (2/3, 1)
    a, b = scene(1, 3), scene(1, 4)
    preds = [[(a.keypoints[0], 0.9)], [(b.keypoints[0] + 500.0, 0.8), (b.keypoints[0], 0.7)]]
    m = evaluate_ap(preds, [a, b])
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert m["AP50"] == pytest.approx(expected, abs=1e-12)
    assert m["AP"] == pytest.approx(expected, abs=1e-12)
    assert m["AR"] == 1.0


def test_hand_case_partial_thresholds():
    # OKS 0.72 counts at thresholds 0.50..0.70 (5 of 10) and misses 0.75..0.95
    ann = scene(1, 5)
    pred = displaced(ann.keypoints[0], ann.areas[0], 0.72)
    m = evaluate_ap([[(pred, 0.8)]], [ann])
    assert m["AP50"] == 1.0 and m["AP75"] == 0.0
    assert m["AP"] == pytest.approx(0.5, abs=1e-12)
    assert m["AR"] == pytest.approx(0.5, abs=1e-12)


def test_each_ground_truth_matched_once():
    ann = scene(1, 6)
    gt = ann.keypoints[0]
    # two perfect copies: the second is a false positive at every threshold
    m = evaluate_ap([[(gt, 0.9), (gt, 0.8)]], [ann])
    assert m["AP"] == 1.0
    m = evaluate_ap([[(gt, 0.8), (gt + 500, 0.9)]], [ann])
    # the top-ranked pose misses: precision at full recall is 1/2
    assert m["AP"] == pytest.approx(0.5, abs=1e-12)


def test_area_ranges():
    small = scene(1, 7, size=(20.0, 40.0))      # 800 px^2: neither medium nor large
    medium = scene(1, 8, size=(40.0, 60.0))     # 2400
    large = scene(1, 9, size=(100.0, 150.0))    # 15000
    anns = [small, medium, large]
    m = evaluate_ap(ground_truth_as_predictions(anns), anns)
    assert m["AP_M"] == 1.0 and m["AP_L"] == 1.0
    only_medium = [[], ground_truth_as_predictions([medium])[0], []]
    m = evaluate_ap(only_medium, anns)
    assert m["AP_M"] == 1.0 and m["AP_L"] == 0.0


def test_unlabeled_ground_truth_is_ignored():
    ann = scene(2, 10)
    ann.visibility[1] = 0
    m = evaluate_ap([[(ann.keypoints[0], 0.9)]], [ann])
    assert m["AP"] == 1.0


def test_max_dets_truncates():
    ann = scene(3, 11)
    preds = [[(k, 0.9 - 0.1 * i) for i, k in enumerate(ann.keypoints)]]
    assert evaluate_ap(preds, [ann], max_dets=2)["AR"] == pytest.approx(2 / 3)


def test_tie_order_follows_insertion():
    ann = scene(1, 12)
    gt = ann.keypoints[0]
    hit_first = evaluate_ap([[(gt, 0.5), (gt + 500, 0.5)]], [ann])["AP"]
    miss_first = evaluate_ap([[(gt + 500, 0.5), (gt, 0.5)]], [ann])["AP"]
    assert hit_first == 1.0 and miss_first == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 0.99))
def test_adding_a_correct_prediction_never_lowers_ap(seed, score):
    rng = np.random.default_rng(seed)
    anns = [scene(2, seed), scene(1, seed + 1)]
    preds = [[(anns[0].keypoints[0] + rng.normal(0, 3, (17, 2)), float(rng.uniform()))],
             [(anns[1].keypoints[0] + 300, float(rng.uniform()))]]
    before = evaluate_ap(preds, anns)["AP"]
    preds[0].append((anns[0].keypoints[1], score))
    assert evaluate_ap(preds, anns)["AP"] >= before - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_zero_score_false_positive_does_not_change_ap(seed):
    rng = np.random.default_rng(seed)
    anns = [scene(2, seed)]
    preds = [[(k + rng.normal(0, 2, (17, 2)), float(rng.uniform(0.1, 1))) for k in anns[0].keypoints]]
    before = evaluate_ap(preds, anns)["AP"]
    preds[0].append((anns[0].keypoints[0] + 900, 0.0))
    assert evaluate_ap(preds, anns)["AP"] == pytest.approx(before, abs=1e-12)
