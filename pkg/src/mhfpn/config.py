"""Flat ``section.key = value`` run configuration.

Lines are ``key = value`` with ``#`` comments; lists are comma separated.
Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from mhfpn.backbone import BackboneConfig
from mhfpn.data import SceneSpec
from mhfpn.head import HeadConfig
from mhfpn.necks import ConfigError, NeckConfig


@dataclass
class DataConfig:
    image_side: int = 64
    masses_per_image_mean: float = 1.1
    small_fraction: float = 0.5
    small_area_range: tuple[float, float] = (9.0, 36.0)
    large_area_range: tuple[float, float] = (400.0, 900.0)
    noise_sigma: float = 0.03
    seed: int = 0
    n_images: int = 250
    split: str = "fivefold"
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    annotations: str = ""

    def __post_init__(self):
        if self.split not in ("fivefold", "holdout"):
            raise ConfigError(f"data.split must be 'fivefold' or 'holdout', got {self.split!r}")

    def scene_spec(self) -> SceneSpec:
        names = {f.name for f in dataclasses.fields(SceneSpec)}
        return SceneSpec(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 4
    grad_clip: float = 10.0
    warmup_steps: int = 100
    seed: int = 0
    replicate: int = 0


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.2, 0.5, 0.75)
    score_thresholds: tuple[float, ...] = ()
    froc_iou: float = 0.5
    select_fppi: float = 1.0


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every model/training seed set to ``seed``; the dataset seed is kept."""
        cfg = dataclasses.replace(self)
        cfg.backbone = dataclasses.replace(self.backbone, seed=seed)
        cfg.neck = dataclasses.replace(self.neck, seed=seed)
        cfg.head = dataclasses.replace(self.head, seed=seed)
        cfg.train = dataclasses.replace(self.train, seed=seed)
        return cfg


SECTIONS = ("backbone", "neck", "head", "data", "train", "eval")


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            args = typing.get_args(tp)
            inner = args[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_coerce(p, inner, key) for p in parts)
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        obj = getattr(cfg, section)
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _coerce(value, hints[name], key)
    out = dataclasses.replace(cfg)
    for section, vals in updates.items():
        if vals:
            setattr(out, section, dataclasses.replace(getattr(cfg, section), **vals))
    return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RunConfig) -> str:
    """Fully resolved config in the same ``key = value`` syntax it is read from."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
