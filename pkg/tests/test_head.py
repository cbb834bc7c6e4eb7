import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhfpn.boxes import Box, Detection, iou
from mhfpn.gradcheck import check_head_loss
from mhfpn.head import (
    Head,
    HeadConfig,
    LevelOutput,
    assign_targets,
    batch_targets,
    decode_detections,
    detection_loss,
    head_forward,
    level_for_box,
    nms,
)
from mhfpn.necks import NeckOutput
from mhfpn.tensor import GradTape, Tensor, backward

STRIDES = (4, 8, 16, 32)


def neck_out(C=4, side=64, seed=0):
    rng = np.random.default_rng(seed)
    return NeckOutput([Tensor(rng.normal(size=(2, C, side // s, side // s))) for s in STRIDES])


def outputs_from(logits_value, reg_value=1.0, side=64):
    return [
        LevelOutput(Tensor(np.full((1, 1, side // s, side // s), logits_value)),
                    Tensor(np.full((1, 4, side // s, side // s), reg_value)), s)
        for s in STRIDES
    ]


def test_head_shapes():
    out = head_forward(neck_out(), Head(4, HeadConfig()))
    for lvl, s in zip(out, STRIDES):
        assert lvl.cls_logits.shape == (2, 1, 64 // s, 64 // s)
        assert lvl.box_reg.shape == (2, 4, 64 // s, 64 // s)
        assert lvl.stride == s
        assert (lvl.box_reg.data > 0).all()


def test_zero_tower_gives_bias_logits():
    head = Head(4, HeadConfig(prior_prob=0.01))
    bias = head.cls.bias.data.copy()
    for conv in head.tower + [head.cls]:
        conv.weight.data[:] = 0
    for lvl in head_forward(neck_out(), head):
        np.testing.assert_array_equal(lvl.cls_logits.data, bias[0])
    assert bias[0] == pytest.approx(-math.log(99.0))


def test_focal_gradient_reaches_tower():
    head = Head(4, HeadConfig())
    targets = batch_targets([assign_targets([Box(8, 8, 20, 20)], STRIDES, (64, 64), HeadConfig())] * 2)
    with GradTape():
        backward(detection_loss(head_forward(neck_out(), head), targets), head.parameters())
    for conv in head.tower:
        assert np.linalg.norm(conv.weight.grad) > 0


def test_scale_bands_lower_inclusive():
    assert level_for_box(Box(0, 0, 15.9, 15.9)) == 0
    assert level_for_box(Box(0, 0, 16, 16)) == 1
    assert level_for_box(Box(0, 0, 32, 32)) == 2
    assert level_for_box(Box(0, 0, 64, 64)) == 3


def test_whole_image_box_only_on_coarsest_level():
    targets = assign_targets([Box(0, 0, 64, 64)], STRIDES, (64, 64), HeadConfig())
    counts = [int(t.mask.sum()) for t in targets]
    # direct rule: sqrt(area) = 64 falls in the top band; stride-32 grid points 0 and 32,
    # only 32 is strictly inside the box, and it is the centre
    assert counts == [0, 0, 0, 1]
    np.testing.assert_allclose(targets[3].reg[0, :, 1, 1], [1.0, 1.0, 1.0, 1.0])


def test_no_gt_all_negative():
    for t in assign_targets([], STRIDES, (64, 64), HeadConfig()):
        assert not t.labels.any() and not t.reg.any()


def test_shared_center_smaller_wins():
    big, small = Box(0, 0, 48, 48), Box(8, 8, 40, 40)  # both in the stride-16 band, centre (24, 24)
    t = assign_targets([big, small], STRIDES, (64, 64), HeadConfig())[2]
    assert t.mask.sum() > 0
    for i, j in zip(*np.nonzero(t.mask[0])):
        x, y = j * 16, i * 16
        np.testing.assert_allclose(t.reg[0, :, i, j], np.array([x - 8, y - 8, 40 - x, 40 - y]) / 16)


def test_shared_center_different_bands_both_assigned():
    big, small = Box(0, 0, 48, 48), Box(14, 14, 34, 34)
    t = assign_targets([big, small], STRIDES, (64, 64), HeadConfig())
    assert t[1].mask.sum() > 0 and t[2].mask.sum() > 0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(2, 60), st.floats(2, 60))
def test_positive_targets_strictly_positive(x, y, w, h):
    box = Box(x, y, min(x + w, 64.0), min(y + h, 64.0))
    for t in assign_targets([box], STRIDES, (64, 64), HeadConfig()):
        if t.mask.any():
            assert (t.reg[0][:, t.mask[0]] > 0).all()


def test_perfect_prediction_loss_vanishes():
    boxes = [Box(4, 4, 20, 20), Box(30, 28, 60, 62)]
    targets = assign_targets(boxes, STRIDES, (64, 64), HeadConfig())
    outs = []
    for t in targets:
        logits = np.where(t.labels > 0.5, 20.0, -20.0)
        reg = np.where(t.mask[:, None], t.reg, 1.0)
        outs.append(LevelOutput(Tensor(logits), Tensor(reg), t.stride))
    assert detection_loss(outs, targets).item() < 1e-6


def test_all_negative_focal_closed_form():
    targets = assign_targets([], STRIDES, (64, 64), HeadConfig())
    count = sum(t.labels.size for t in targets)
    # p = 0.5 on a negative: (1 - alpha) * p^2 * -log(1 - p)
    per = 0.75 * 0.25 * math.log(2.0)
    assert detection_loss(outputs_from(0.0), targets).item() == pytest.approx(per * count, rel=1e-12)


def test_head_loss_finite_difference():
    assert check_head_loss(points=1).worst < 1e-4


def test_decode_threshold_empty():
    assert decode_detections(outputs_from(0.0), HeadConfig(score_threshold=0.6), (64, 64)) == []


def test_decode_single_location():
    outs = outputs_from(-30.0)
    outs[0].cls_logits.data[0, 0, 2, 2] = 5.0
    dets = decode_detections(outs, HeadConfig(), (64, 64))
    assert len(dets) == 1
    assert dets[0].box.as_list() == [4.0, 4.0, 12.0, 12.0]
    assert dets[0].score == pytest.approx(1 / (1 + math.exp(-5)), abs=1e-12)
    assert dets[0].score == pytest.approx(0.9933, abs=1e-4)


def test_decode_clips_to_image():
    outs = outputs_from(-30.0, reg_value=10.0)
    outs[0].cls_logits.data[0, 0, 1, 15] = 3.0
    (det,) = decode_detections(outs, HeadConfig(), (64, 64))
    assert det.box.as_list() == [20.0, 0.0, 64.0, 44.0]


def test_decode_encode_round_trip():
    box = Box(9.25, 3.5, 22.75, 28.5)  # centre (16, 16) lies on the stride-4 and -8 grids
    targets = assign_targets([box], STRIDES, (64, 64), HeadConfig(center_radius=0.1))
    outs = []
    for t in targets:
        outs.append(LevelOutput(Tensor(np.where(t.labels > 0.5, 10.0, -30.0)),
                                Tensor(np.where(t.mask[:, None], t.reg, 1.0)), t.stride))
    (det,) = decode_detections(outs, HeadConfig(), (64, 64))
    np.testing.assert_allclose(det.box.as_list(), box.as_list(), atol=1e-9)


def test_nms_examples():
    a = Detection(Box(0, 0, 10, 10), 0.9)
    assert nms([a, Detection(Box(0, 0, 10, 10), 0.8)], 0.5) == [a]
    disjoint = [Detection(Box(20 * k, 0, 20 * k + 10, 10), 0.5 + 0.1 * k) for k in range(3)]
    assert sorted(nms(disjoint, 0.5), key=lambda d: d.score) == disjoint
    # chain: IoU(A,B) = IoU(B,C) = 0.6, A and C below threshold (exact 0.6/0.6 with
    # A and C fully disjoint is geometrically impossible)
    A = Detection(Box(0, 0, 10, 1), 0.9)
    B = Detection(Box(2.5, 0, 12.5, 1), 0.8)
    C = Detection(Box(5, 0, 15, 1), 0.7)
    assert iou(A.box, B.box) == pytest.approx(0.6)
    assert iou(B.box, C.box) == pytest.approx(0.6)
    assert iou(A.box, C.box) == pytest.approx(1 / 3)
    assert nms([C, A, B], 0.5) == [A, C] == brute_nms([A, B, C], 0.5)


def brute_nms(dets, thr):
    kept = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(iou(d.box, k.box) <= thr for k in kept):
            kept.append(d)
    return kept


box_st = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)).map(
    lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(box_st, st.floats(0, 1)), max_size=12), st.floats(0.1, 0.9))
def test_nms_properties(items, thr):
    dets = [Detection(b, s) for b, s in items]
    kept = nms(dets, thr)
    assert kept == brute_nms(dets, thr)
    assert all(any(k is d for d in dets) for k in kept)
    assert all(a.score >= b.score for a, b in zip(kept, kept[1:]))
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].box, kept[j].box) <= thr
