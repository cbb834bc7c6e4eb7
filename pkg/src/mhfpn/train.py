"""Training loop (SGD + momentum, warmup then cosine decay) and model evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mhfpn.backbone import STRIDES
from mhfpn.boxes import Detection
from mhfpn.config import RunConfig, TrainConfig
from mhfpn.cost import count_flops, count_params
from mhfpn.data import AnnotatedImage, five_fold_split, generate_dataset, holdout_split, load_annotations
from mhfpn.head import assign_targets, batch_targets, decode_detections, detection_loss
from mhfpn.metrics import MetricsReport, default_score_thresholds, evaluate, froc
from mhfpn.model import Detector
from mhfpn.tensor import GradTape, Tensor, backward, no_grad

log = logging.getLogger(__name__)

Predictor = Callable[[Sequence[AnnotatedImage]], list[list[Detection]]]


class TrainingDiverged(RuntimeError):
    pass


def build_model(cfg: RunConfig) -> Detector:
    return Detector(cfg.backbone, cfg.neck, cfg.head)


def load_dataset(cfg: RunConfig) -> list[AnnotatedImage]:
    if cfg.data.annotations:
        return load_annotations(cfg.data.annotations)
    return generate_dataset(cfg.data.scene_spec(), cfg.data.n_images)


def split_for(cfg: RunConfig, dataset: Sequence[AnnotatedImage], replicate: int | None = None):
    """(train, val, test) image lists for one replicate of the configured protocol."""
    r = cfg.train.replicate if replicate is None else replicate
    ids = [im.image_id for im in dataset]
    if cfg.data.split == "fivefold":
        tr, va, te = five_fold_split(ids, cfg.data.seed).replicate(r)
    else:
        tr, va, te = holdout_split(ids, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.seed * 1000 + r)
    by_id = {im.image_id: im for im in dataset}
    return [by_id[i] for i in tr], [by_id[i] for i in va], [by_id[i] for i in te]


def _stack(images: Sequence[AnnotatedImage]) -> Tensor:
    return Tensor(np.concatenate([im.pixels.data for im in images]))


def predict(model: Detector, images: Sequence[AnnotatedImage], batch_size: int = 16) -> list[list[Detection]]:
    out: list[list[Detection]] = []
    cfg = model.head.config
    with no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i : i + batch_size]
            x = _stack(chunk)
            head_out = model(x)
            hw = x.shape[2:]
            out.extend(decode_detections(head_out, cfg, hw, b) for b in range(len(chunk)))
    return out


def model_predictor(model: Detector) -> Predictor:
    return lambda images: predict(model, images)


def evaluate_predictions(dets: list[list[Detection]], images: Sequence[AnnotatedImage], cfg: RunConfig) -> MetricsReport:
    gts = [im.gts for im in images]
    thresholds = list(cfg.eval.score_thresholds) or default_score_thresholds()
    return evaluate(dets, gts, cfg.eval.iou_thresholds, thresholds, froc_iou=cfg.eval.froc_iou)


def evaluate_model(model: Detector, images: Sequence[AnnotatedImage], cfg: RunConfig,
                   predictor: Predictor | None = None) -> MetricsReport:
    dets = (predictor or model_predictor(model))(images)
    rep = evaluate_predictions(dets, images, cfg)
    side = cfg.data.image_side
    rep.params = count_params(model)
    rep.flops = count_flops(model, (1, 1, side, side))
    return rep


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_tpr: float


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    history: list[EpochLog] = field(default_factory=list)


def _targets(images: Sequence[AnnotatedImage], cfg: RunConfig):
    side = images[0].pixels.shape[2:]
    return batch_targets([assign_targets(im.boxes, STRIDES, side, cfg.head) for im in images])


def learning_rate(tc: TrainConfig, step: int, total_steps: int) -> float:
    """Cosine decay from ``tc.lr`` to 0, with a linear ramp over the first ``tc.warmup_steps``."""
    lr = 0.5 * tc.lr * (1.0 + math.cos(math.pi * step / total_steps))
    if step < tc.warmup_steps:
        lr *= (step + 1) / tc.warmup_steps
    return lr


def validation_tpr(model: Detector, images: Sequence[AnnotatedImage], cfg: RunConfig) -> float:
    """Best FROC TPR reached at or below ``eval.select_fppi`` false positives per image."""
    if not images:
        return 0.0
    dets = predict(model, images)
    curve = froc(dets, [im.gts for im in images], cfg.eval.froc_iou, default_score_thresholds())
    return curve.tpr_at_fppi(cfg.eval.select_fppi)


def train(model: Detector, train_set: Sequence[AnnotatedImage], val_set: Sequence[AnnotatedImage], cfg: RunConfig,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    tc = cfg.train
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n_batches = math.ceil(len(train_set) / tc.batch_size)
    total_steps = max(1, tc.epochs * n_batches)
    targets_cache = {}
    result = TrainResult(model.state_dict(), 0)
    best_tpr = -1.0
    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([tc.seed, epoch])).permutation(len(train_set))
        losses = []
        for b in range(n_batches):
            idx = tuple(int(i) for i in order[b * tc.batch_size : (b + 1) * tc.batch_size])
            batch = [train_set[i] for i in idx]
            if idx not in targets_cache:
                targets_cache[idx] = _targets(batch, cfg)
            with GradTape():
                loss = detection_loss(model(_stack(batch)), targets_cache[idx])
                backward(loss, params)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b} (lr {tc.lr})")
            losses.append(value)
            lr = learning_rate(tc, step, total_steps)
            grads = [p.grad + tc.weight_decay * p.data for p in params]
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            clip = min(1.0, tc.grad_clip / norm) if tc.grad_clip > 0 and norm > 0 else 1.0
            for p, v, g in zip(params, velocity, grads):
                v *= tc.momentum
                v += clip * g
                p.data = p.data - lr * v
            step += 1
        entry = EpochLog(epoch, float(np.mean(losses)), validation_tpr(model, val_set, cfg))
        result.history.append(entry)
        log.info("epoch %d loss %.6f val_tpr %.4f", entry.epoch, entry.loss, entry.val_tpr)
        if on_epoch:
            on_epoch(entry)
        if entry.val_tpr >= best_tpr:
            best_tpr = entry.val_tpr
            result.best_state = model.state_dict()
            result.best_epoch = epoch
    return result
