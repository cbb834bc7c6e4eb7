"""Synthetic mammogram-like scenes, the five-part split protocol, and PGM/JSON storage.

Masses are soft Gaussian bumps on a smooth background. Box sizes are bimodal:
a small band (9-36 px^2) and a large band (400-900 px^2) on 64 px images,
which keeps the wide small/large spread of real masses at toy scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mhfpn.boxes import Box, iou
from mhfpn.metrics import GroundTruth
from mhfpn.tensor import Tensor

MAX_MASSES = 3


class AnnotationError(ValueError):
    pass


@dataclass
class SceneSpec:
    image_side: int = 64
    masses_per_image_mean: float = 1.1
    small_fraction: float = 0.5
    small_area_range: tuple[float, float] = (9.0, 36.0)
    large_area_range: tuple[float, float] = (400.0, 900.0)
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.small_area_range = tuple(float(v) for v in self.small_area_range)
        self.large_area_range = tuple(float(v) for v in self.large_area_range)
        if self.image_side % 32:
            raise ValueError(f"image_side must be divisible by 32, got {self.image_side}")
        (s0, s1), (l0, l1) = self.small_area_range, self.large_area_range
        if not (0 < s0 <= s1 and 0 < l0 <= l1) or not (s1 < l0 or l1 < s0):
            raise ValueError("area ranges must be positive and disjoint")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ValueError("small_fraction must lie in [0, 1]")
        if l1 > self.image_side**2:
            raise ValueError("large masses do not fit in the image")


@dataclass
class AnnotatedImage:
    image_id: int
    pixels: Tensor  # (1, 1, S, S), values k / 255
    gts: list[GroundTruth] = field(default_factory=list)

    @property
    def boxes(self) -> list[Box]:
        return [g.box for g in self.gts]


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def _image_rng(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, image_id]))


def _sample_box(rng: np.random.Generator, spec: SceneSpec) -> Box:
    lo, hi = spec.small_area_range if rng.random() < spec.small_fraction else spec.large_area_range
    area = rng.uniform(lo, hi)
    aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    S = spec.image_side
    w = min(math.sqrt(area * aspect), S)
    h = area / w
    if h > S:
        h = S
        w = area / h
    cx = rng.uniform(w / 2, S - w / 2)
    cy = rng.uniform(h / 2, S - h / 2)
    x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    return Box(x1, y1, x1 + w, y1 + h)


def generate_image(spec: SceneSpec, image_id: int) -> AnnotatedImage:
    rng = _image_rng(spec.seed, image_id)
    S = spec.image_side
    n = min(int(rng.poisson(spec.masses_per_image_mean)), MAX_MASSES) if spec.masses_per_image_mean > 0 else 0
    boxes: list[Box] = []
    for _ in range(n):
        for _attempt in range(20):
            b = _sample_box(rng, spec)
            if all(iou(b, o) < 0.1 for o in boxes):
                break
        boxes.append(b)

    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    img = 0.25 + gx * (xx / S - 0.5) + gy * (yy / S - 0.5)
    for b in boxes:
        cx, cy = b.center
        # box edges sit two sigmas from the centre
        sx, sy = (b.x2 - b.x1) / 4, (b.y2 - b.y1) / 4
        amp = rng.uniform(0.35, 0.55)
        img = img + amp * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    pixels = quantize(img).reshape(1, 1, S, S)
    return AnnotatedImage(image_id, Tensor(pixels), [GroundTruth.from_box(image_id, b, S) for b in boxes])


def generate_dataset(spec: SceneSpec, n_images: int, first_id: int = 0) -> list[AnnotatedImage]:
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    return [generate_image(spec, first_id + i) for i in range(n_images)]


# ---------------------------------------------------------------- splitting


@dataclass
class SplitPlan:
    parts: list[list[int]]

    def replicate(self, r: int) -> tuple[list[int], list[int], list[int]]:
        """(train, val, test) for replicate ``r``: test = part r, val = part r+1, train = the other three."""
        test = self.parts[r % 5]
        val = self.parts[(r + 1) % 5]
        train = [i for k in range(5) if k not in (r % 5, (r + 1) % 5) for i in self.parts[k]]
        return train, list(val), list(test)


def five_fold_split(ids, seed: int = 0) -> SplitPlan:
    ids = list(ids)
    if len(ids) < 5:
        raise ValueError(f"five-fold split needs at least 5 ids, got {len(ids)}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 5])).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitPlan([shuffled[k::5] for k in range(5)])


def holdout_split(ids, n_train: int, n_val: int, n_test: int, seed: int) -> tuple[list[int], list[int], list[int]]:
    """Seeded random partition into fixed-size train/val/test lists."""
    ids = list(ids)
    if n_train + n_val + n_test > len(ids):
        raise ValueError(f"need {n_train + n_val + n_test} ids, have {len(ids)}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(ids))
    s = [ids[i] for i in order]
    return s[:n_train], s[n_train : n_train + n_val], s[n_train + n_val : n_train + n_val + n_test]


# ------------------------------------------------------------------- storage


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    q = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Binary 8-bit PGM to floats in [0, 1]."""
    buf = Path(path).read_bytes()
    pos = 0
    fields: list[str] = []
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise AnnotationError(f"{path}: truncated PGM header at byte {pos}")
        fields.append(buf[start:pos].decode("ascii", "replace"))
    if fields[0] != "P5":
        raise AnnotationError(f"{path}: bad PGM magic {fields[0]!r} at byte 0")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise AnnotationError(f"{path}: non-integer PGM header field near byte {pos}") from None
    if maxval != 255:
        raise AnnotationError(f"{path}: only 8-bit PGM supported (maxval {maxval}) near byte {pos}")
    pos += 1  # single whitespace after maxval
    data = buf[pos:]
    if len(data) != w * h:
        raise AnnotationError(f"{path}: expected {w * h} pixel bytes after byte {pos}, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def save_annotations(dataset: list[AnnotatedImage], path: str | Path) -> None:
    """Write ``<stem>_<id>.pgm`` images beside a single annotation JSON file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for item in dataset:
        _, _, h, w = item.pixels.shape
        fname = f"img_{item.image_id:05d}.pgm"
        write_pgm(path.parent / fname, item.pixels.data[0, 0])
        images.append({"id": item.image_id, "file": fname, "width": w, "height": h})
        for g in item.gts:
            annotations.append({"image_id": item.image_id, "bbox": g.box.as_list()})
    doc = {"images": images, "annotations": annotations}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_annotations(path: str | Path) -> list[AnnotatedImage]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    try:
        images = doc["images"]
        anns = doc.get("annotations", [])
    except (TypeError, KeyError) as e:
        raise AnnotationError(f"{path}: missing key {e}") from None
    by_id: dict[int, AnnotatedImage] = {}
    sizes: dict[int, tuple[int, int]] = {}
    out = []
    for rec in images:
        pix = read_pgm(path.parent / rec["file"])
        h, w = pix.shape
        if (rec.get("width", w), rec.get("height", h)) != (w, h):
            raise AnnotationError(f"{path}: image {rec['id']} declares {rec['width']}x{rec['height']}, file is {w}x{h}")
        item = AnnotatedImage(int(rec["id"]), Tensor(pix.reshape(1, 1, h, w)))
        by_id[item.image_id] = item
        sizes[item.image_id] = (w, h)
        out.append(item)
    for k, a in enumerate(anns):
        img_id = int(a["image_id"])
        if img_id not in by_id:
            raise AnnotationError(f"{path}: annotation {k} refers to unknown image {img_id}")
        x1, y1, x2, y2 = (float(v) for v in a["bbox"])
        w, h = sizes[img_id]
        if not (x2 > x1 and y2 > y1):
            raise AnnotationError(f"{path}: annotation {k} bbox {a['bbox']} needs x2 > x1 and y2 > y1")
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            raise AnnotationError(f"{path}: annotation {k} bbox {a['bbox']} leaves the {w}x{h} image")
        by_id[img_id].gts.append(GroundTruth.from_box(img_id, Box(x1, y1, x2, y2), max(w, h)))
    return out
