"""Double-precision 4-D tensors with a tape-based reverse-mode gradient engine.

Every differentiable op appends one record to the active :class:`GradTape`
when any of its inputs tracks gradients. :func:`backward` replays those
records in exact reverse order. Ops are plain functions over numpy arrays;
numpy does the arithmetic, this module does the bookkeeping.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "TapeError",
    "ShapeError",
    "backward",
    "no_grad",
    "conv2d",
    "pool2d",
    "upsample_bilinear",
    "resize_bilinear",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "slice_channels",
    "relu",
    "exp",
    "sum_all",
    "sigmoid_focal_loss",
    "iou_loss",
    "finite_diff_check",
    "dump_tensor",
    "parse_tensor_dump",
    "count_flops_of",
    "inject_fault",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of executed ops; usable once per :func:`backward` call.

    Use as a context manager to make it the active tape::

        with GradTape() as tape:
            loss = model(x)
            backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_TAPES: list[GradTape] = [GradTape()]
_GRAD_ENABLED = [True]
_FAULTS: set[str] = set()
_FLOP_COUNTERS: list[dict[str, int]] = []


def current_tape() -> GradTape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def inject_fault(*ops: str) -> Iterator[None]:
    """Test hook: perturb the adjoint of the named ops by 1%."""
    added = set(ops) - _FAULTS
    _FAULTS.update(added)
    try:
        yield
    finally:
        _FAULTS.difference_update(added)


@contextlib.contextmanager
def count_flops_of() -> Iterator[dict[str, int]]:
    """Collect per-op FLOP totals of every forward op executed inside."""
    counter: dict[str, int] = {}
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


def _flops(op: str, n: int) -> None:
    for counter in _FLOP_COUNTERS:
        counter[op] = counter.get(op, 0) + int(n)


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        tape = current_tape()
        if tape.consumed:
            raise TapeError("tape already used by backward(); call reset() first")
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(op, inputs, out, vjp))
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Fill ``.grad`` of every leaf reachable from ``loss``.

    Leaves on the tape that the loss does not depend on, and every tensor in
    ``params``, end with an all-zero gradient when unreachable.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        p.zero_grad()
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape without reset()")
    tape.consumed = True

    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        if rec.op in _FAULTS:
            in_grads = [None if ig is None else ig * 1.01 for ig in in_grads]
        for t, ig in zip(rec.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)


def _check_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what}: expected (B, C, H, W), got shape {t.shape}")


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """(C * kh * kw, B * Ho * Wo) patch matrix of an already padded input."""
    B, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride].transpose(1, 0, 2, 3)
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    out = np.zeros(x.shape[:2] + (x.shape[2] + 2 * p, x.shape[3] + 2 * p))
    out[:, :, p:-p, p:-p] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and one matrix product."""
    _check_4d(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be (C_out, C_in, kH, kW), got {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects C_in={Ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} leaves empty output on {H}x{W} with padding {padding}")

    xp = _pad2d(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    _flops("conv2d", 2 * O * C * kh * kw * Ho * Wo * B + (O * Ho * Wo * B if bias is not None else 0))

    def vjp(g):
        gx = gw = gb = None
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # full correlation of the output grad with the flipped kernel
            gp = np.zeros((B, O, Ho + 2 * (kh - 1), Wo + 2 * (kw - 1)))
            gp[:, :, kh - 1 : kh - 1 + Ho, kw - 1 : kw - 1 + Wo] = g
            gcols = _im2col(gp, kh, kw, 1, Ho + kh - 1, Wo + kw - 1)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
            gxp = (wflip @ gcols).reshape(C, B, Ho + kh - 1, Wo + kw - 1).transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        elif x.requires_grad:
            dcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, vjp)


# -------------------------------------------------------------------- pooling


def pool2d(x: Tensor, factor: int, mode: str = "max") -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` pooling; factor 1 is the identity."""
    _check_4d(x, "pool2d input")
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"pool2d factor must be one of 1, 2, 4, 8; got {factor}")
    if mode not in ("max", "avg"):
        raise ValueError(f"pool2d mode must be 'max' or 'avg'; got {mode!r}")
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"pool2d: {H}x{W} is not divisible by factor {factor}")
    if factor == 1:
        return _emit("pool2d", x.data.copy(), (x,), lambda g: (g,))
    Ho, Wo = H // factor, W // factor
    _flops("pool2d", B * C * Ho * Wo)
    win = x.data.reshape(B, C, Ho, factor, Wo, factor).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, factor * factor)

    if mode == "avg":
        out = win.mean(axis=-1)

        def vjp(g):
            gw = np.broadcast_to((g / (factor * factor))[..., None, :, None], (B, C, Ho, factor, Wo, factor))
            return (gw.reshape(B, C, H, W),)

        return _emit("pool2d", out, (x,), vjp)

    # argmax keeps the first row-major maximum within each window
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros((B, C, Ho, Wo, factor * factor))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(B, C, Ho, Wo, factor, factor).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _emit("pool2d", out, (x,), vjp)


# ------------------------------------------------------------------ resampling


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (n_out, n_in), half-pixel centres.

    Matches ``align_corners=False``: output sample ``o`` reads source
    coordinate ``(o + 0.5) * n_in / n_out - 0.5`` clamped at 0.
    """
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resample of the spatial dims to ``out_h`` x ``out_w``."""
    _check_4d(x, "resize input")
    B, C, H, W = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    mh = interp_matrix(H, out_h)
    mw = interp_matrix(W, out_w)
    out = np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True)
    _flops("upsample", B * C * out_h * out_w)

    def vjp(g):
        return (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),)

    return _emit("upsample", out, (x,), vjp)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 4, 8):
        raise ValueError(f"upsample factor must be 2, 4 or 8; got {factor}")
    _check_4d(x, "upsample input")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _flops("add", a.size)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in ts:
        _check_4d(t, "concat input")
    ref = ts[0].shape
    for t in ts[1:]:
        if (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat_channels: (B, H, W) mismatch {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=1)

    def vjp(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts))]

    return _emit("concat", out, tuple(ts), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(x, "slice input")

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return (gx,)

    return _emit("slice", x.data[:, start:stop].copy(), (x,), vjp)


# ---------------------------------------------------------------------- losses


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss on raw logits; ``targets`` holds 0/1 labels."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"focal loss: targets {t.shape} vs logits {x.shape}")
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_q
    loss = np.where(t > 0.5, pos, neg).sum()

    def vjp(g):
        d_pos = alpha * (1.0 - p) ** gamma * (gamma * p * log_p - (1.0 - p))
        d_neg = (1.0 - alpha) * p**gamma * (p - gamma * (1.0 - p) * log_q)
        return (g * np.where(t > 0.5, d_pos, d_neg),)

    return _emit("focal_loss", np.array(loss), (logits,), vjp)


def iou_loss(dist: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of ``-log IoU`` over masked locations.

    ``dist`` and ``target`` are (B, 4, h, w) positive (l, t, r, b) distances
    measured from the same location; ``mask`` is (B, h, w) boolean.
    """
    _check_4d(dist, "iou_loss input")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != dist.shape or mask.shape != (dist.shape[0],) + dist.shape[2:]:
        raise ShapeError("iou_loss: inconsistent dist/target/mask shapes")
    if not mask.any():
        return _emit("iou_loss", np.array(0.0), (dist,), lambda g: (np.zeros(dist.shape),))
    d = dist.data.transpose(0, 2, 3, 1)[mask]
    tg = target.transpose(0, 2, 3, 1)[mask]
    l, t, r, b = d.T
    lt, tt, rt, bt = tg.T
    area_p = (l + r) * (t + b)
    area_t = (lt + rt) * (tt + bt)
    wi = np.minimum(l, lt) + np.minimum(r, rt)
    hi = np.minimum(t, tt) + np.minimum(b, bt)
    inter = wi * hi
    union = area_p + area_t - inter
    loss = (np.log(union) - np.log(inter)).sum()

    def vjp(g):
        wsel = np.stack([l < lt, t < tt, r < rt, b < bt], axis=1).astype(np.float64)
        d_inter = wsel * np.stack([hi, wi, hi, wi], axis=1)
        d_area = np.stack([t + b, l + r, t + b, l + r], axis=1)
        d_union = d_area - d_inter
        gd = g * (d_union / union[:, None] - d_inter / inter[:, None])
        full = np.zeros((dist.shape[0],) + dist.shape[2:] + (4,))
        full[mask] = gd
        return (full.transpose(0, 3, 1, 2),)

    return _emit("iou_loss", np.array(loss), (dist,), vjp)


# -------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    epsilon: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    ``coords`` restricts the comparison to selected flat indices.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with GradTape():
        out = f(x)
        if out.size != 1:
            raise ShapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        backward(out, params=[x])
    analytic = x.grad.reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            hi = f(Tensor(base)).item()
            flat[i] = old - epsilon
            lo = f(Tensor(base)).item()
            flat[i] = old
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


# -------------------------------------------------------------------- dumping


def dump_tensor(t: Tensor) -> str:
    """Shape header line, then row-major values at 17 significant digits."""
    header = " ".join(str(d) for d in t.shape)
    body = "\n".join(f"{v:.17g}" for v in t.data.reshape(-1))
    return f"{header}\n{body}\n" if body else f"{header}\n"


def parse_tensor_dump(text: str) -> Tensor:
    lines = text.strip("\n").split("\n")
    shape = tuple(int(s) for s in lines[0].split())
    values = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"dump has {values.size} values for shape {shape}")
    return Tensor(values.reshape(shape))
