"""Single-class detection metrics: matching, AP, TPR, FPPI, FROC, size-bucketed AP.

Conventions:

* a detection counts as a hit only when IoU is strictly greater than the
  threshold (``IoU > x``), not ``>=`` as in pycocotools;
* detections are ranked globally by descending score, ties broken by image
  index and then box coordinates, so every reduction is deterministic;
* a metric that has no ground truth to measure against is ``None`` (written
  ``-`` in CSV) rather than 0/0.
"""

from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mhfpn.boxes import Box, Detection, iou_matrix

UNDEFINED = "-"

# COCO area thresholds (32^2, 96^2) are defined for ~800 px images
COCO_SMALL_AREA = 32.0**2
COCO_LARGE_AREA = 96.0**2
COCO_REFERENCE_SIDE = 800.0


def size_class(box: Box, image_side: int = 64) -> str:
    scale = image_side / COCO_REFERENCE_SIDE
    if box.area < COCO_SMALL_AREA * scale:
        return "S"
    if box.area < COCO_LARGE_AREA * scale:
        return "M"
    return "L"


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: Box
    size_class: str

    @classmethod
    def from_box(cls, image_id: int, box: Box, image_side: int = 64) -> "GroundTruth":
        return cls(image_id, box, size_class(box, image_side))


@dataclass
class MatchResult:
    """Outcome of greedy matching, with detections in global rank order."""

    scores: np.ndarray
    image_index: np.ndarray
    tp: np.ndarray
    gt_index: np.ndarray  # matched gt position within its image, -1 for FP
    gt_matched: list[np.ndarray]
    num_images: int

    @property
    def num_gt(self) -> int:
        return int(sum(len(m) for m in self.gt_matched))


def rank_detections(dets: Sequence[Sequence[Detection]]) -> list[tuple[int, Detection]]:
    flat = [(img, d) for img, ds in enumerate(dets) for d in ds]
    flat.sort(key=lambda it: (-it[1].score, it[0], it[1].box.x1, it[1].box.y1, it[1].box.x2, it[1].box.y2))
    return flat


def match_detections(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
                     iou_thr: float) -> MatchResult:
    """Each detection, best score first, takes the highest-IoU still-unmatched gt with IoU > thr."""
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    ranked = rank_detections(dets)
    gt_boxes = [np.array([g.box.as_list() for g in gs]).reshape(-1, 4) for gs in gts]
    matched = [np.zeros(len(gs), dtype=bool) for gs in gts]
    n = len(ranked)
    tp = np.zeros(n, dtype=bool)
    gt_index = np.full(n, -1)
    for k, (img, det) in enumerate(ranked):
        if not len(gt_boxes[img]):
            continue
        ious = iou_matrix(np.array([det.box.as_list()]), gt_boxes[img])[0]
        ious[matched[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] > iou_thr:
            matched[img][best] = True
            tp[k] = True
            gt_index[k] = best
    return MatchResult(
        scores=np.array([d.score for _, d in ranked], dtype=np.float64),
        image_index=np.array([img for img, _ in ranked], dtype=int),
        tp=tp,
        gt_index=gt_index,
        gt_matched=matched,
        num_images=len(gts),
    )


def _suffix_argmax(values: np.ndarray) -> np.ndarray:
    """Index of the maximum of ``values[i:]`` for every i (first one on ties)."""
    out = np.empty(len(values), dtype=int)
    best = len(values) - 1
    for i in range(len(values) - 1, -1, -1):
        if values[i] >= values[best]:
            best = i
        out[i] = best
    return out


def average_precision(tp: np.ndarray | MatchResult, num_gt: int | None = None, method: str = "coco101") -> float:
    """Area under the interpolated precision-recall curve.

    ``method="coco101"`` samples the precision envelope at recall 0, 0.01, ..., 1;
    ``method="envelope"`` integrates it exactly. Precision and recall are ratios
    of small integers, so the sum is taken in rational arithmetic and rounded
    once. Returns 0.0 when there are no ground truths or no detections.
    """
    if isinstance(tp, MatchResult):
        num_gt = tp.num_gt if num_gt is None else num_gt
        tp = tp.tp
    tp = np.asarray(tp, dtype=bool)
    if not num_gt or not tp.size:
        return 0.0
    tp_c = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    best = _suffix_argmax(tp_c / ranks)

    def env(i: int) -> Fraction:
        j = best[i]
        return Fraction(int(tp_c[j]), int(ranks[j]))

    if method == "envelope":
        total, prev = Fraction(0), 0
        for i in np.flatnonzero(tp):
            total += Fraction(int(tp_c[i]) - prev, num_gt) * env(i)
            prev = int(tp_c[i])
        return float(total)
    if method != "coco101":
        raise ValueError(f"unknown AP method {method!r}")
    # first rank reaching recall k/100, i.e. tp_c * 100 >= k * num_gt
    idx = np.searchsorted(tp_c * 100, np.arange(101) * num_gt, side="left")
    ranks_hit, counts = np.unique(idx[idx < len(tp)], return_counts=True)
    total = sum((int(n) * env(i) for i, n in zip(ranks_hit, counts)), Fraction(0))
    return float(total / 101)


def tpr_at(matches: MatchResult, num_gt: int | None = None) -> float | None:
    num_gt = matches.num_gt if num_gt is None else num_gt
    if num_gt == 0:
        return None
    return int(matches.tp.sum()) / num_gt


def fppi(matches: MatchResult, num_images: int | None = None) -> float:
    num_images = matches.num_images if num_images is None else num_images
    if num_images < 1:
        raise ValueError("fppi needs at least one image")
    return int((~matches.tp).sum()) / num_images


@dataclass
class FrocCurve:
    thresholds: list[float]
    points: list[tuple[float, float | None]]  # (fppi, tpr)

    def tpr_at_fppi(self, max_fppi: float) -> float:
        """Best TPR reached without exceeding ``max_fppi`` false positives per image."""
        best = 0.0
        for f, t in self.points:
            if f <= max_fppi and t is not None:
                best = max(best, t)
        return best


def froc(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]], iou_thr: float,
         thresholds: Sequence[float]) -> FrocCurve:
    """One (FPPI, TPR) point per score threshold, keeping detections with score >= threshold.

    Greedy matching consumes detections in score order, so the matching of
    any score-thresholded subset is a prefix of the full matching.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b > a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("froc thresholds must be sorted in descending order")
    m = match_detections(dets, gts, iou_thr)
    num_gt = m.num_gt
    tp_c = np.concatenate([[0], np.cumsum(m.tp)])
    fp_c = np.concatenate([[0], np.cumsum(~m.tp)])
    # scores are descending, so the kept detections form a prefix
    neg_scores = -m.scores
    points = []
    for t in thresholds:
        k = int(np.searchsorted(neg_scores, -t, side="right"))
        tpr = tp_c[k] / num_gt if num_gt else None
        points.append((fp_c[k] / max(m.num_images, 1), tpr))
    return FrocCurve(thresholds, points)


def size_bucketed_ap(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]], iou_thr: float,
                     bucket: str, method: str = "coco101") -> float | None:
    """AP over the gts of one size bucket; detections matched to other buckets are dropped.

    Returns None when the bucket holds no ground truth.
    """
    if bucket not in ("S", "M", "L"):
        raise ValueError(f"bucket must be S, M or L, got {bucket!r}")
    num_gt = sum(1 for gs in gts for g in gs if g.size_class == bucket)
    if num_gt == 0:
        return None
    m = match_detections(dets, gts, iou_thr)
    keep = np.ones(len(m.tp), dtype=bool)
    for k in np.nonzero(m.tp)[0]:
        if gts[m.image_index[k]][m.gt_index[k]].size_class != bucket:
            keep[k] = False
    return average_precision(m.tp[keep], num_gt, method)


@dataclass
class MetricsReport:
    ap: dict[float, float | None] = field(default_factory=dict)
    tpr: dict[float, float | None] = field(default_factory=dict)
    fppi: float = 0.0
    ap_small: dict[float, float | None] = field(default_factory=dict)
    ap_large: dict[float, float | None] = field(default_factory=dict)
    froc: FrocCurve | None = None
    params: int = 0
    flops: int = 0

    def row(self) -> dict[str, float | int | None]:
        return {
            "AP@50": self.ap.get(0.5),
            "AP@75": self.ap.get(0.75),
            "AP@50S": self.ap_small.get(0.5),
            "AP@50L": self.ap_large.get(0.5),
            "TPR@50": self.tpr.get(0.5),
            "TPR@20": self.tpr.get(0.2),
            "FPPI": self.fppi,
            "Params": self.params,
            "FLOPs": self.flops,
        }


REPORT_COLUMNS = ["AP@50", "AP@75", "AP@50S", "AP@50L", "TPR@50", "TPR@20", "FPPI", "Params", "FLOPs"]


def evaluate(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
             iou_thresholds: Sequence[float] = (0.2, 0.5, 0.75),
             score_thresholds: Sequence[float] | None = None,
             froc_iou: float = 0.5, fppi_iou: float = 0.5) -> MetricsReport:
    num_gt = sum(len(g) for g in gts)
    rep = MetricsReport()
    for thr in sorted(set(iou_thresholds) | {froc_iou, fppi_iou}):
        m = match_detections(dets, gts, thr)
        rep.ap[thr] = average_precision(m) if num_gt else None
        rep.tpr[thr] = tpr_at(m)
        rep.ap_small[thr] = size_bucketed_ap(dets, gts, thr, "S")
        rep.ap_large[thr] = size_bucketed_ap(dets, gts, thr, "L")
        if thr == fppi_iou:
            rep.fppi = fppi(m)
    if score_thresholds is None:
        score_thresholds = default_score_thresholds()
    rep.froc = froc(dets, gts, froc_iou, sorted(score_thresholds, reverse=True))
    return rep


def default_score_thresholds() -> list[float]:
    return [round(1.0 - 0.01 * i, 2) for i in range(101)]


def format_value(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def parse_value(s: str):
    if s == UNDEFINED:
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def reports_to_csv(rows: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + REPORT_COLUMNS)
    for name, rep in rows.items():
        r = rep.row()
        w.writerow([name] + [format_value(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def csv_to_rows(text: str) -> dict[str, dict]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return {rec[0]: {c: parse_value(v) for c, v in zip(header[1:], rec[1:])} for rec in reader}


def froc_to_csv(curve: FrocCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fppi", "tpr"])
    for t, (f, r) in zip(curve.thresholds, curve.points):
        w.writerow([format_value(t), format_value(f), format_value(r)])
    return buf.getvalue()


def csv_to_froc(text: str) -> FrocCurve:
    reader = csv.reader(io.StringIO(text))
    next(reader)
    thresholds, points = [], []
    for t, f, r in reader:
        thresholds.append(float(t))
        points.append((float(f), parse_value(r)))
    return FrocCurve(thresholds, points)
