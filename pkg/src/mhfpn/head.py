"""One-stage anchor-free detection head: tower, targets, loss, decoding, NMS.

A location ``(i, j)`` on a level with stride ``s`` sits at pixel ``(j*s, i*s)``.
Regression channels carry (l, t, r, b) distances from that point to the box
edges, in stride units, made positive by ``exp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mhfpn.boxes import Box, Detection, iou_matrix
from mhfpn.necks import NeckOutput
from mhfpn.nn import INIT_SCHEMES, Conv2d, Module
from mhfpn.tensor import Tensor, add, exp, iou_loss, scale, sigmoid_focal_loss

# sqrt(area) lower bounds for strides 4, 8, 16, 32; each band is [lo, next lo)
SCALE_BANDS = (0.0, 16.0, 32.0, 64.0)


@dataclass
class HeadConfig:
    num_convs: int = 2
    center_radius: float = 1.5
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    prior_prob: float = 0.01
    seed: int = 0
    init: str = "scaled"

    def __post_init__(self):
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        for name in ("score_threshold", "nms_iou", "prior_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"head.{name} must lie in [0, 1], got {v}")


@dataclass
class LevelOutput:
    cls_logits: Tensor  # (B, 1, h, w)
    box_reg: Tensor  # (B, 4, h, w), positive
    stride: int


@dataclass
class LevelTargets:
    labels: np.ndarray  # (B, 1, h, w) of 0/1
    reg: np.ndarray  # (B, 4, h, w) stride units, zero off positives
    stride: int

    @property
    def mask(self) -> np.ndarray:
        return self.labels[:, 0] > 0.5


class Head(Module):
    """Conv tower shared by every level, then 1-channel logits and 4-channel distances."""

    def __init__(self, channels: int, config: HeadConfig):
        self.config = config
        self.tower = [Conv2d(channels, channels, 3, act=True) for _ in range(config.num_convs)]
        self.cls = Conv2d(channels, 1, 3)
        self.reg = Conv2d(channels, 4, 3)
        self.init_parameters(config.seed, config.init)
        self.cls.bias.data[:] = -math.log((1.0 - config.prior_prob) / config.prior_prob)

    def forward(self, neck_out: NeckOutput) -> list[LevelOutput]:
        return head_forward(neck_out, self)


def head_forward(neck_out: NeckOutput, head: Head) -> list[LevelOutput]:
    outs = []
    for x, s in zip(neck_out.levels, neck_out.strides):
        for conv in head.tower:
            x = conv(x)
        outs.append(LevelOutput(head.cls(x), exp(head.reg(x)), s))
    return outs


def level_for_box(box: Box) -> int:
    side = math.sqrt(box.area)
    level = 0
    for i, lo in enumerate(SCALE_BANDS):
        if side >= lo:
            level = i
    return level


def assign_targets(gts: list[Box], strides, image_hw: tuple[int, int], config: HeadConfig) -> list[LevelTargets]:
    """Targets for one image; every returned array has a leading batch axis of 1."""
    H, W = image_hw
    out = []
    for level, s in enumerate(strides):
        h, w = H // s, W // s
        labels = np.zeros((1, 1, h, w))
        reg = np.zeros((1, 4, h, w))
        best_area = np.full((h, w), np.inf)
        ys = (np.arange(h) * s)[:, None].astype(np.float64)
        xs = (np.arange(w) * s)[None, :].astype(np.float64)
        radius = config.center_radius * s
        for box in gts:
            if level_for_box(box) != level:
                continue
            cx, cy = box.center
            inside = (xs > box.x1) & (xs < box.x2) & (ys > box.y1) & (ys < box.y2)
            near = (np.abs(xs - cx) < radius) & (np.abs(ys - cy) < radius)
            take = inside & near & (box.area < best_area)
            if not take.any():
                continue
            best_area[take] = box.area
            labels[0, 0][take] = 1.0
            dist = np.stack(np.broadcast_arrays(xs - box.x1, ys - box.y1, box.x2 - xs, box.y2 - ys)) / s
            reg[0][:, take] = dist[:, take]
        out.append(LevelTargets(labels, reg, s))
    return out


def batch_targets(per_image: list[list[LevelTargets]]) -> list[LevelTargets]:
    return [
        LevelTargets(
            np.concatenate([img[k].labels for img in per_image]),
            np.concatenate([img[k].reg for img in per_image]),
            per_image[0][k].stride,
        )
        for k in range(len(per_image[0]))
    ]


def detection_loss(head_out: list[LevelOutput], targets: list[LevelTargets],
                   alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Focal loss over all locations plus IoU loss on positives, over max(1, #positives)."""
    num_pos = sum(int(t.mask.sum()) for t in targets)
    total = None
    for out, tgt in zip(head_out, targets):
        term = add(sigmoid_focal_loss(out.cls_logits, tgt.labels, alpha, gamma), iou_loss(out.box_reg, tgt.reg, tgt.mask))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / max(1, num_pos))


def decode_detections(head_out: list[LevelOutput], config: HeadConfig, image_hw: tuple[int, int],
                      batch_index: int = 0) -> list[Detection]:
    H, W = image_hw
    boxes, scores = [], []
    for out in head_out:
        s = out.stride
        logits = out.cls_logits.data[batch_index, 0]
        score = 1.0 / (1.0 + np.exp(-logits))
        keep = score >= config.score_threshold
        if not keep.any():
            continue
        ii, jj = np.nonzero(keep)
        d = out.box_reg.data[batch_index][:, ii, jj] * s
        x, y = jj * s, ii * s
        b = np.stack([x - d[0], y - d[1], x + d[2], y + d[3]], axis=1)
        b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, W)
        b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, H)
        boxes.append(b)
        scores.append(score[ii, jj])
    if not boxes:
        return []
    b = np.concatenate(boxes)
    sc = np.concatenate(scores)
    valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
    dets = [Detection(Box(*map(float, bb)), float(s)) for bb, s in zip(b[valid], sc[valid])]
    return nms(dets, config.nms_iou)[: config.max_detections]


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy NMS; ties in score keep input order."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = np.array([dets[i].box.as_list() for i in order])
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        kept.append(dets[order[k]])
        alive &= ~(ious[k] > iou_threshold)
        alive[k] = False
    return kept
