"""Toy CNN backbone producing the four-level pyramid at strides 4/8/16/32."""

from __future__ import annotations

from dataclasses import dataclass, field

from mhfpn.nn import INIT_SCHEMES, Conv2d, Module
from mhfpn.tensor import ShapeError, Tensor, add, relu, resize_bilinear

STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneConfig:
    stem_channels: int = 8
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    relu: bool = True
    seed: int = 0
    init: str = "scaled"

    def __post_init__(self):
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4:
            raise ValueError(f"stage_channels needs 4 entries, got {self.stage_channels}")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be non-decreasing, got {self.stage_channels}")
        if self.stem_channels < 1 or self.blocks_per_stage < 0:
            raise ValueError("stem_channels must be >= 1 and blocks_per_stage >= 0")


@dataclass
class PyramidFeatures:
    levels: list[Tensor]
    strides: list[int] = field(default_factory=lambda: list(STRIDES))

    def __post_init__(self):
        if len(self.levels) != 4 or len(self.strides) != 4:
            raise ShapeError(f"a pyramid has exactly 4 levels, got {len(self.levels)}")

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)


class ResidualBlock(Module):
    def __init__(self, channels: int, act: bool):
        self.conv = Conv2d(channels, channels, 3)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = add(x, self.conv(x))
        return relu(y) if self.act else y


class Stage(Module):
    def __init__(self, c_in: int, c_out: int, blocks: int, act: bool):
        self.down = Conv2d(c_in, c_out, 3, stride=2, act=act)
        self.blocks = [ResidualBlock(c_out, act) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x


class Backbone(Module):
    """Two stride-2 stem convs, then three stride-2 stages with residual blocks."""

    def __init__(self, config: BackboneConfig):
        self.config = config
        c = config.stage_channels
        act = config.relu
        self.stem = [
            Conv2d(1, config.stem_channels, 3, stride=2, act=act),
            Conv2d(config.stem_channels, c[0], 3, stride=2, act=act),
        ]
        self.stages = [Stage(c[i], c[i + 1], config.blocks_per_stage, act) for i in range(3)]
        self.init_parameters(config.seed, config.init)

    def forward(self, image: Tensor) -> PyramidFeatures:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, model: Backbone) -> PyramidFeatures:
    if image.data.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"backbone expects a (B, 1, H, W) image, got {image.shape}")
    H, W = image.shape[2:]
    if H % 32 or W % 32:
        raise ShapeError(f"input {H}x{W} must be divisible by 32")
    x = image
    for conv in model.stem:
        x = conv(x)
    levels = [x]
    for stage in model.stages:
        x = stage(x)
        levels.append(x)
    return PyramidFeatures(levels)


def resize_input(image: Tensor, target_h: int, target_w: int) -> Tensor:
    """Stretch to the target size (no letterboxing) with half-pixel bilinear sampling."""
    if target_h % 32 or target_w % 32:
        raise ShapeError(f"target {target_h}x{target_w} must be divisible by 32")
    if image.shape[2:] == (target_h, target_w):
        return image
    return resize_bilinear(image, target_h, target_w)
