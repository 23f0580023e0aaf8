import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import finite_difference, rel_error
from sparsepose.errors import ConfigurationError, InvalidGeometryError
from sparsepose.geometry import (
    COCO_KAPPAS, box_iou, clip_boxes, denormalize_keypoints, fpn_levels, giou, multilevel_roi_align,
    normalize_keypoints, oks, oks_matrix, roi_align,
)

T = lambda *v: torch.tensor(v, dtype=torch.float64)


def test_giou_identical_boxes():
    a = T(1.0, 2.0, 5.0, 7.0)
    assert float(giou(a, a)) == pytest.approx(1.0)


def test_giou_disjoint_boxes_hand_value():
    assert float(giou(T(0, 0, 1, 1), T(2, 2, 3, 3))) == pytest.approx(-7 / 9, abs=1e-12)


def test_giou_overlapping_boxes_hand_value():
    assert float(giou(T(0, 0, 2, 2), T(1, 1, 3, 3))) == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)


@pytest.mark.parametrize("bad", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, float("nan"), 1)])
def test_giou_rejects_degenerate(bad):
    with pytest.raises(InvalidGeometryError):
        giou(T(*bad), T(0, 0, 1, 1))


boxes_st = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40)
).map(lambda v: T(v[0], v[1], v[0] + v[2], v[1] + v[3]))


@settings(max_examples=200, deadline=None)
@given(boxes_st, boxes_st)
def test_giou_symmetric_and_bounded_by_iou(a, b):
    g_ab, g_ba = float(giou(a, b)), float(giou(b, a))
    assert g_ab == pytest.approx(g_ba, abs=1e-12)
    iou = float(box_iou(a, b))
    assert g_ab <= iou + 1e-12
    assert -1 < g_ab <= 1 + 1e-12


def test_giou_equals_iou_when_hull_is_union():
    a, b = T(0, 0, 4, 4), T(1, 1, 2, 2)
    assert float(giou(a, b)) == pytest.approx(float(box_iou(a, b)))
    assert float(box_iou(a, b)) == pytest.approx(1 / 16)


def test_clip_boxes_keeps_min_size():
    out = clip_boxes(T(-5, -5, -1, 3), 10, 10)
    assert out[0] == 0 and out[2] > out[0] and out[3] == 3


# ---------------------------------------------------------------------------
# RoIAlign


def _feat(h=8, w=10, c=3):
    return torch.randn(1, c, h, w, dtype=torch.float64)


def test_roi_align_constant_feature():
    feat = torch.full((2, 4, 9, 11), 3.25, dtype=torch.float64)
    boxes = T(0.5, 1.0, 7.0, 8.0).view(1, 4).repeat(3, 1)
    boxes[1] = T(2.0, 0.0, 11.0, 9.0)
    out = roi_align(feat, boxes, torch.tensor([0, 1, 1]), (5, 3))
    assert out.shape == (3, 4, 5, 3)
    assert torch.allclose(out, torch.full_like(out, 3.25), atol=1e-12)


def test_roi_align_linear_ramp_matches_bin_centres():
    H, W = 10, 16
    xs = torch.arange(W, dtype=torch.float64)
    feat = xs.view(1, 1, 1, W).expand(1, 1, H, W).contiguous()
    # box edges in continuous coordinates: pixel centre i sits at i + 0.5
    x1, x2 = 2.5, 12.5
    box = T(x1, 1.5, x2, 8.5).view(1, 4)
    out = roi_align(feat, box, torch.tensor([0]), (4, 5))
    bin_w = (x2 - x1) / 5
    expected = torch.tensor([x1 - 0.5 + bin_w * (j + 0.5) for j in range(5)], dtype=torch.float64)
    assert torch.allclose(out[0, 0], expected.expand(4, 5), atol=1e-12)


def test_roi_align_identity_sampling():
    feat = _feat(6, 7)
    box = T(0, 0, 7, 6).view(1, 4)
    out = roi_align(feat, box, torch.tensor([0]), (6, 7), sampling_ratio=1)
    assert torch.allclose(out[0], feat[0], atol=1e-12)


def test_roi_align_matches_torchvision():
    tv = pytest.importorskip("torchvision")
    feat = torch.randn(2, 5, 12, 14, dtype=torch.float64)
    boxes = torch.tensor([[1.0, 2.0, 30.0, 40.0], [0.0, 0.0, 56.0, 48.0], [10.3, 7.7, 22.1, 19.9]],
                         dtype=torch.float64)
    bidx = torch.tensor([0, 1, 0])
    ours = roi_align(feat, boxes, bidx, (7, 7), 0.25, 2)
    ref = tv.ops.roi_align(feat, torch.cat([bidx[:, None].double(), boxes], 1), (7, 7), 0.25, 2, aligned=True)
    assert torch.allclose(ours, ref, atol=1e-10)


def test_roi_align_rejects_bad_output_size():
    with pytest.raises(ConfigurationError):
        roi_align(_feat(), T(0, 0, 4, 4).view(1, 4), torch.tensor([0]), (0, 3))


def test_roi_align_empty():
    out = roi_align(_feat(), torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, dtype=torch.long), (2, 2))
    assert out.shape == (0, 3, 2, 2)


def test_roi_align_preserves_roi_order_across_images():
    feat = torch.randn(3, 2, 8, 8, dtype=torch.float64)
    boxes = torch.tensor([[1.0, 1.0, 6.0, 7.0]] * 4, dtype=torch.float64)
    bidx = torch.tensor([2, 0, 1, 0])
    out = roi_align(feat, boxes, bidx, (3, 3))
    for r in range(4):
        single = roi_align(feat[bidx[r] : bidx[r] + 1], boxes[r : r + 1], torch.tensor([0]), (3, 3))
        assert torch.equal(out[r], single[0])


def test_roi_align_feature_gradient_finite_difference():
    feat = _feat(5, 6, 2).requires_grad_()
    boxes = T(0.7, 0.4, 4.9, 4.1).view(1, 4)
    w = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    f = lambda x: (roi_align(x, boxes, torch.tensor([0]), (3, 3)) * w).sum()
    f(feat).backward()
    num = finite_difference(f, feat.detach())
    assert rel_error(feat.grad, num) < 1e-4


def test_roi_align_box_gradient_finite_difference():
    feat = _feat(6, 6, 2)
    boxes = T(0.9, 1.3, 4.6, 5.2).view(1, 4).requires_grad_()
    w = torch.randn(1, 2, 2, 2, dtype=torch.float64)
    f = lambda b: (roi_align(feat, b, torch.tensor([0]), (2, 2)) * w).sum()
    f(boxes).backward()
    num = finite_difference(f, boxes.detach())
    assert rel_error(boxes.grad, num) < 1e-4


def test_fpn_level_rule():
    boxes = T(0, 0, 224, 224).view(1, 4).repeat(4, 1)
    boxes[1, 2:] = 112
    boxes[2, 2:] = 20
    boxes[3, 2:] = 900
    assert fpn_levels(boxes).tolist() == [4, 3, 2, 5]


def test_multilevel_roi_align_routes_by_size():
    pyramid = [torch.randn(1, 2, 64 // 2**i, 64 // 2**i, dtype=torch.float64) for i in range(4)]
    boxes = torch.tensor([[0.0, 0.0, 20.0, 20.0], [0.0, 0.0, 500.0, 500.0]], dtype=torch.float64)
    out = multilevel_roi_align(pyramid, boxes, torch.tensor([0, 0]), (2, 2))
    small = roi_align(pyramid[0], boxes[:1], torch.tensor([0]), (2, 2), 1 / 4)
    large = roi_align(pyramid[3], boxes[1:], torch.tensor([0]), (2, 2), 1 / 32)
    assert torch.equal(out[0], small[0]) and torch.equal(out[1], large[0])


# ---------------------------------------------------------------------------
# keypoint normalisation


def test_normalize_centre_corner_and_outside():
    box = T(10, 20, 30, 60)
    kps = T(20, 40, 10, 20, 9, 40).view(3, 2)
    coords, mask = normalize_keypoints(kps, torch.tensor([2, 2, 2]), box)
    assert coords[0].tolist() == [0.0, 0.0] and mask[0]
    assert coords[1].tolist() == [-0.5, -0.5] and not mask[1]
    assert coords[2, 0] == pytest.approx(-0.55) and not mask[2]


def test_normalize_masks_unlabeled():
    _, mask = normalize_keypoints(T(20, 40).view(1, 2), torch.tensor([0]), T(10, 20, 30, 60))
    assert not mask[0]


def test_denormalize_hand_values():
    assert denormalize_keypoints(T(0, 0).view(1, 2), T(10, 10, 20, 20)).tolist() == [[15.0, 15.0]]
    assert denormalize_keypoints(T(-0.25, 0.25).view(1, 2), T(0, 0, 4, 8)).tolist() == [[1.0, 6.0]]


@settings(max_examples=100, deadline=None)
@given(boxes_st, st.lists(st.tuples(st.floats(0.01, 0.99), st.floats(0.01, 0.99)), min_size=1, max_size=17))
def test_normalize_round_trip(box, rel):
    rel = torch.tensor(rel, dtype=torch.float64)
    kps = box[:2] + rel * (box[2:] - box[:2])
    coords, mask = normalize_keypoints(kps, torch.full((len(rel),), 2), box)
    assert ((coords[mask] > -0.5) & (coords[mask] < 0.5)).all()
    back = denormalize_keypoints(coords, box)
    assert (back - kps)[mask].abs().max() < 1e-9 if mask.any() else True


# ---------------------------------------------------------------------------
# OKS


def test_oks_perfect_and_far():
    gt = np.random.rand(17, 2) * 100
    vis = np.full(17, 2)
    assert oks(gt, gt, vis, 500.0) == pytest.approx(1.0)
    assert oks(gt + 1e6, gt, vis, 500.0) == pytest.approx(0.0, abs=1e-12)


def test_oks_single_keypoint_formula():
    gt = np.zeros((17, 2))
    pred = gt.copy()
    pred[3] = [3.0, 4.0]
    vis = np.zeros(17)
    vis[3] = 1
    area, k = 400.0, COCO_KAPPAS[3]
    assert oks(pred, gt, vis, area) == pytest.approx(math.exp(-25 / (2 * area * k * k)), rel=1e-12)


def test_oks_no_labeled_keypoints_is_none():
    assert oks(np.zeros((17, 2)), np.zeros((17, 2)), np.zeros(17), 10.0) is None


def test_coco_kappas_are_twice_published_sigmas():
    assert COCO_KAPPAS[0] == pytest.approx(0.052)
    assert COCO_KAPPAS[-1] == pytest.approx(0.178)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_oks_translation_invariant(dx, dy):
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 100, (17, 2))
    pred = gt + rng.normal(0, 3, (17, 2))
    vis = rng.integers(0, 3, 17)
    vis[0] = 2
    shift = np.array([dx, dy])
    assert oks(pred + shift, gt + shift, vis, 900.0) == pytest.approx(oks(pred, gt, vis, 900.0), abs=1e-9)


def test_oks_matrix_agrees_with_scalar():
    rng = np.random.default_rng(2)
    preds = rng.uniform(0, 50, (3, 17, 2))
    gts = rng.uniform(0, 50, (2, 17, 2))
    vis = rng.integers(1, 3, (2, 17))
    areas = np.array([300.0, 800.0])
    mat = oks_matrix(preds, gts, vis, areas)
    for d in range(3):
        for g in range(2):
            assert mat[d, g] == pytest.approx(oks(preds[d], gts[g], vis[g], areas[g]))
