"""Finite-difference verification of every differentiable op and every neck variant."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mhfpn.backbone import Backbone, BackboneConfig, PyramidFeatures
from mhfpn.boxes import Box
from mhfpn.head import Head, HeadConfig, assign_targets, batch_targets, detection_loss, head_forward
from mhfpn.necks import VARIANTS, Neck, NeckConfig, NeckOutput, neck_forward
from mhfpn import tensor as T
from mhfpn.tensor import GradTape, Tensor, backward, finite_diff_check, no_grad

TOLERANCE = 1e-4
EPSILON = 1e-5


@dataclass
class CheckResult:
    component: str
    worst: float
    points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]]:
    """Each case draws a fresh scalar test function and evaluation point from ``rng``."""

    def conv(stride, padding, k):
        def case(rng):
            w = Tensor(rng.uniform(-1, 1, (3, 2, k, k)))
            b = Tensor(rng.uniform(-1, 1, 3))
            x = rng.uniform(-1, 1, (2, 2, 6, 6))
            probe = rng.normal(size=T.conv2d(Tensor(x), w, b, stride, padding).shape)
            return (lambda v: T.sum_all(T.mul(T.conv2d(v, w, b, stride, padding), Tensor(probe)))), x
        return case

    def conv_weight(rng):
        x = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)))
        probe = rng.normal(size=(2, 3, 3, 3))
        return (lambda v: T.sum_all(T.mul(T.conv2d(x, v, None, 2, 1), Tensor(probe)))), rng.uniform(-1, 1, (3, 2, 3, 3))

    def conv_bias(rng):
        x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)))
        probe = rng.normal(size=(1, 3, 4, 4))
        return (lambda v: T.sum_all(T.mul(T.conv2d(x, w, v, 1, 1), Tensor(probe)))), rng.uniform(-1, 1, 3)

    def unary(fn, shape):
        def case(rng):
            x = rng.uniform(-1, 1, shape)
            probe = rng.normal(size=fn(Tensor(x)).shape)
            return (lambda v: T.sum_all(T.mul(fn(v), Tensor(probe)))), x
        return case

    def add_case(rng):
        other = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        probe = rng.normal(size=(1, 2, 3, 3))
        return (lambda v: T.sum_all(T.mul(T.add(v, other), Tensor(probe)))), rng.uniform(-1, 1, (1, 2, 3, 3))

    def concat_case(rng):
        other = Tensor(rng.uniform(-1, 1, (1, 3, 3, 3)))
        probe = rng.normal(size=(1, 5, 3, 3))
        return (lambda v: T.sum_all(T.mul(T.concat_channels([other, v]), Tensor(probe)))), rng.uniform(-1, 1, (1, 2, 3, 3))

    def mul_case(rng):
        other = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        return (lambda v: T.sum_all(T.mul(v, T.mul(v, other)))), rng.uniform(-1, 1, (1, 2, 3, 3))

    def focal_case(rng):
        labels = (rng.random((2, 1, 3, 3)) > 0.6).astype(float)
        return (lambda v: T.sigmoid_focal_loss(v, labels)), rng.uniform(-1, 1, (2, 1, 3, 3))

    def iou_case(rng):
        target = rng.uniform(0.3, 2.0, (2, 4, 3, 3))
        mask = rng.random((2, 3, 3)) > 0.3
        mask[0, 0, 0] = True
        return (lambda v: T.iou_loss(T.exp(v), target, mask)), rng.uniform(-1, 1, target.shape)

    return {
        "conv2d s1 p1": conv(1, 1, 3),
        "conv2d s2 p1": conv(2, 1, 3),
        "conv2d s1 p0 k1": conv(1, 0, 1),
        "conv2d weight": conv_weight,
        "conv2d bias": conv_bias,
        "pool2d max": unary(lambda v: T.pool2d(v, 2, "max"), (1, 2, 4, 4)),
        "pool2d avg": unary(lambda v: T.pool2d(v, 4, "avg"), (1, 2, 8, 4)),
        "upsample x2": unary(lambda v: T.upsample_bilinear(v, 2), (1, 2, 3, 4)),
        "upsample x4": unary(lambda v: T.upsample_bilinear(v, 4), (1, 1, 2, 3)),
        "upsample x8": unary(lambda v: T.upsample_bilinear(v, 8), (1, 1, 2, 2)),
        "resize": unary(lambda v: T.resize_bilinear(v, 3, 5), (1, 1, 6, 4)),
        "add": add_case,
        "concat": concat_case,
        "slice": unary(lambda v: T.slice_channels(v, 1, 3), (1, 4, 2, 2)),
        "relu": unary(T.relu, (1, 2, 3, 3)),
        "exp": unary(T.exp, (1, 2, 3, 3)),
        "scale": unary(lambda v: T.scale(v, -2.5), (1, 2, 2, 2)),
        "mul": mul_case,
        "focal_loss": focal_case,
        "iou_loss": iou_case,
    }


def check_op(name: str, points: int = 10, seed: int = 0) -> CheckResult:
    case = _op_cases()[name]
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(name)]))
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(points):
        f, x = case(rng)
        worst = max(worst, finite_diff_check(f, x, EPSILON))
    return CheckResult(name, worst, points, time.perf_counter() - t0)


def op_names() -> list[str]:
    return list(_op_cases())


# ------------------------------------------------------------ module checks


def check_leaves(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], rng: np.random.Generator,
                 max_coords: int | None = 48, epsilon: float = EPSILON) -> float:
    """Finite-difference check of ``loss_fn`` jointly over several leaf tensors.

    Same error measure as :func:`finite_diff_check`; ``max_coords`` samples
    that many flat coordinates across all leaves (None checks them all).
    """
    for leaf in leaves:
        leaf.requires_grad = True
    with GradTape():
        loss = loss_fn()
        backward(loss, leaves)
    analytic = np.concatenate([leaf.grad.reshape(-1) for leaf in leaves])
    sizes = np.cumsum([0] + [leaf.size for leaf in leaves])
    total = int(sizes[-1])
    coords = np.arange(total) if max_coords is None or max_coords >= total else rng.choice(total, max_coords, replace=False)
    worst = 0.0
    with no_grad():
        for c in coords:
            k = int(np.searchsorted(sizes, c, side="right") - 1)
            flat = leaves[k].data.reshape(-1)
            i = c - sizes[k]
            old = flat[i]
            flat[i] = old + epsilon
            hi = loss_fn().item()
            flat[i] = old - epsilon
            lo = loss_fn().item()
            flat[i] = old
            numeric = (hi - lo) / (2 * epsilon)
            worst = max(worst, abs(analytic[c] - numeric) / max(1.0, abs(analytic[c])))
    return worst


TINY_CHANNELS = (2, 3, 4, 5)


def tiny_features(rng: np.random.Generator, side: int = 32, channels=TINY_CHANNELS) -> PyramidFeatures:
    return PyramidFeatures([Tensor(rng.uniform(-1, 1, (1, c, side // s, side // s))) for c, s in zip(channels, (4, 8, 16, 32))])


def check_neck(variant: str, points: int = 10, seed: int = 0, max_coords: int | None = 48,
               merge_mode: str = "concat_conv") -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for p in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p, VARIANTS.index(variant)]))
        neck = Neck(TINY_CHANNELS, NeckConfig(variant=variant, out_channels=3, merge_mode=merge_mode, seed=seed * 100 + p))
        feats = tiny_features(rng)
        probes = [Tensor(rng.normal(size=(1, 3, 32 // s, 32 // s))) for s in (4, 8, 16, 32)]

        def loss():
            out = neck_forward(feats, neck)
            total = None
            for lvl, pr in zip(out.levels, probes):
                term = T.sum_all(T.mul(lvl, pr))
                total = term if total is None else T.add(total, term)
            return total

        worst = max(worst, check_leaves(loss, list(feats.levels) + neck.parameters(), rng, max_coords))
    return CheckResult(f"neck {variant}", worst, points, time.perf_counter() - t0)


def check_backbone(points: int = 3, seed: int = 0, max_coords: int | None = 32) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for p in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p, 99]))
        bb = Backbone(BackboneConfig(stem_channels=2, stage_channels=TINY_CHANNELS, seed=p))
        img = Tensor(rng.uniform(0, 1, (1, 1, 32, 32)))
        probe = [Tensor(rng.normal(size=s)) for s in ((1, 2, 8, 8), (1, 3, 4, 4), (1, 4, 2, 2), (1, 5, 1, 1))]

        def loss():
            feats = bb(img)
            total = T.sum_all(T.mul(feats[0], probe[0]))
            for lvl, pr in zip(feats.levels[1:], probe[1:]):
                total = T.add(total, T.sum_all(T.mul(lvl, pr)))
            return total

        worst = max(worst, check_leaves(loss, [img] + bb.parameters(), rng, max_coords))
    return CheckResult("backbone", worst, points, time.perf_counter() - t0)


def check_head_loss(points: int = 3, seed: int = 0, max_coords: int | None = 32) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    hc = HeadConfig(num_convs=1)
    boxes = [Box(3.0, 2.0, 12.5, 11.0), Box(14.0, 12.0, 31.0, 30.0)]
    targets = batch_targets([assign_targets(boxes, (4, 8, 16, 32), (32, 32), hc)])
    for p in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p, 7]))
        head = Head(3, HeadConfig(num_convs=1, seed=p))
        levels = NeckOutput([Tensor(rng.uniform(-1, 1, (1, 3, 32 // s, 32 // s))) for s in (4, 8, 16, 32)])
        worst = max(worst, check_leaves(lambda: detection_loss(head_forward(levels, head), targets),
                                        list(levels.levels) + head.parameters(), rng, max_coords))
    return CheckResult("head+loss", worst, points, time.perf_counter() - t0)


def run_suite(points: int = 10, seed: int = 0) -> list[CheckResult]:
    results = [check_op(name, points, seed) for name in op_names()]
    results += [check_neck(v, points, seed) for v in VARIANTS]
    results.append(check_neck("MHFPN", points, seed, merge_mode="sum"))
    results[-1].component = "neck MHFPN (sum merge)"
    results.append(check_backbone(seed=seed))
    results.append(check_head_loss(seed=seed))
    return results
