"""Pyramid fusion necks: FPN, PANet path aggregation, HRFPN and the two-head MHFPN.

All four map a :class:`PyramidFeatures` to a :class:`NeckOutput` with four
levels at strides 4/8/16/32 and ``out_channels`` channels each, so the
detection head is identical across variants.

MHFPN in brief::

    P = path_aggregate(fm)                           # top-down + bottom-up
    SFm_s = merge(P0, up2(P1))     SFm_l = merge(P2, up2(P3))
    Out_s^k = conv(pool_{2^k}(SFm_s))  k = 0, 1, 2   -> strides 4, 8, 16
    Out_l^j = conv(pool_{2^j}(SFm_l))  j = 0, 1      -> strides 16, 32
    output = [Out_s^0, Out_s^1, Out_s^2 + Out_l^0, Out_l^1]
"""

from __future__ import annotations

from dataclasses import dataclass, field

from mhfpn.backbone import STRIDES, PyramidFeatures
from mhfpn.nn import INIT_SCHEMES, Conv2d, Module
from mhfpn.tensor import Tensor, add, concat_channels, pool2d, upsample_bilinear

VARIANTS = ("FPN", "PANET", "HRFPN", "MHFPN")


class ConfigError(ValueError):
    pass


@dataclass
class NeckConfig:
    variant: str = "MHFPN"
    out_channels: int = 32
    merge_mode: str = "concat_conv"
    pool_mode: str = "max"
    relu: bool = False
    seed: int = 0
    init: str = "scaled"

    def __post_init__(self):
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown neck variant {self.variant!r}; expected one of {VARIANTS}")
        if self.out_channels <= 0:
            raise ConfigError(f"out_channels must be positive, got {self.out_channels}")
        if self.merge_mode not in ("sum", "concat_conv"):
            raise ConfigError(f"merge_mode must be 'sum' or 'concat_conv', got {self.merge_mode!r}")
        if self.pool_mode not in ("max", "avg"):
            raise ConfigError(f"pool_mode must be 'max' or 'avg', got {self.pool_mode!r}")


@dataclass
class AggregatedMap:
    small_head: Tensor
    large_head: Tensor


@dataclass
class NeckOutput:
    levels: list[Tensor]
    strides: list[int] = field(default_factory=lambda: list(STRIDES))

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)


def _convs(n: int, c_in: int, c_out: int, kernel: int, act: bool = False, stride: int = 1) -> list[Conv2d]:
    return [Conv2d(c_in, c_out, kernel, stride=stride, act=act) for _ in range(n)]


class Neck(Module):
    """Holds the weights of one neck variant; see :func:`neck_forward`."""

    def __init__(self, in_channels, config: NeckConfig):
        self.config = config
        self.in_channels = tuple(in_channels)
        C, act, v = config.out_channels, config.relu, config.variant
        self.lateral = [Conv2d(c, C, 1) for c in self.in_channels]
        if v in ("FPN", "PANET", "MHFPN"):
            self.fpn_convs = _convs(4, C, C, 3, act)
        if v in ("PANET", "MHFPN"):
            self.down_convs = _convs(3, C, C, 3, act, stride=2)
            self.pafpn_convs = _convs(3, C, C, 3, act)
        if v == "PANET":
            self.out_convs = _convs(4, C, C, 3, act)
        if v == "HRFPN":
            self.merge = Conv2d(4 * C, C, 1)
            self.out_convs = _convs(4, C, C, 3, act)
        if v == "MHFPN":
            if config.merge_mode == "concat_conv":
                self.merge_s = Conv2d(2 * C, C, 1)
                self.merge_l = Conv2d(2 * C, C, 1)
            self.out_s = _convs(3, C, C, 3, act)
            self.out_l = _convs(2, C, C, 3, act)
        self.init_parameters(config.seed, config.init)

    def forward(self, features: PyramidFeatures) -> NeckOutput:
        return neck_forward(features, self)


def lateral_project(features: PyramidFeatures, neck: Neck) -> PyramidFeatures:
    """1x1 convs bringing every level to ``out_channels``."""
    return PyramidFeatures([conv(x) for conv, x in zip(neck.lateral, features)], list(features.strides))


def _top_down(lat: PyramidFeatures) -> list[Tensor]:
    td = [None] * 4
    td[3] = lat[3]
    for i in (2, 1, 0):
        td[i] = add(lat[i], upsample_bilinear(td[i + 1], 2))
    return td


def fpn_forward(features: PyramidFeatures, neck: Neck) -> NeckOutput:
    lat = lateral_project(features, neck)
    td = _top_down(lat)
    return NeckOutput([conv(t) for conv, t in zip(neck.fpn_convs, td)])


def path_aggregate(features: PyramidFeatures, neck: Neck) -> PyramidFeatures:
    """FPN top-down pass followed by a PANet bottom-up pass; returns P(fm^0..fm^3)."""
    inter = fpn_forward(features, neck).levels
    out = [inter[0]]
    for i in range(3):
        out.append(neck.pafpn_convs[i](add(inter[i + 1], neck.down_convs[i](out[i]))))
    return PyramidFeatures(out)


def _merge(fine: Tensor, coarse: Tensor, conv: Conv2d | None) -> Tensor:
    up = upsample_bilinear(coarse, 2)
    if conv is None:
        return add(fine, up)
    return conv(concat_channels([fine, up]))


def mhfpn_aggregate_heads(p: PyramidFeatures, neck: Neck) -> AggregatedMap:
    """Small head fuses P0 with P1, large head fuses P2 with P3."""
    concat = neck.config.merge_mode == "concat_conv"
    small = _merge(p[0], p[1], neck.merge_s if concat else None)
    large = _merge(p[2], p[3], neck.merge_l if concat else None)
    return AggregatedMap(small, large)


def mhfpn_emit_outputs(agg: AggregatedMap, neck: Neck) -> NeckOutput:
    mode = neck.config.pool_mode
    out_s = [conv(pool2d(agg.small_head, 2**k, mode)) for k, conv in enumerate(neck.out_s)]
    out_l = [conv(pool2d(agg.large_head, 2**j, mode)) for j, conv in enumerate(neck.out_l)]
    # both heads land on stride 16
    return NeckOutput([out_s[0], out_s[1], add(out_s[2], out_l[0]), out_l[1]])


def hrfpn_aggregate(features: PyramidFeatures, neck: Neck) -> Tensor:
    """Single head: every projected level upsampled to stride 4, concatenated, 1x1-fused."""
    lat = lateral_project(features, neck)
    ups = [lat[0]] + [upsample_bilinear(lat[i], 2**i) for i in (1, 2, 3)]
    return neck.merge(concat_channels(ups))


def hrfpn_forward(features: PyramidFeatures, neck: Neck) -> NeckOutput:
    agg = hrfpn_aggregate(features, neck)
    mode = neck.config.pool_mode
    return NeckOutput([conv(pool2d(agg, 2**k, mode)) for k, conv in enumerate(neck.out_convs)])


def neck_forward(features: PyramidFeatures, neck: Neck) -> NeckOutput:
    v = neck.config.variant
    if v == "FPN":
        return fpn_forward(features, neck)
    if v == "PANET":
        p = path_aggregate(features, neck)
        return NeckOutput([conv(x) for conv, x in zip(neck.out_convs, p)])
    if v == "HRFPN":
        return hrfpn_forward(features, neck)
    if v == "MHFPN":
        return mhfpn_emit_outputs(mhfpn_aggregate_heads(path_aggregate(features, neck), neck), neck)
    raise ConfigError(f"unknown neck variant {v!r}")
