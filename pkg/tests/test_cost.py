import numpy as np
import pytest

from mhfpn.backbone import Backbone, BackboneConfig
from mhfpn.cost import count_flops, count_params, flop_breakdown
from mhfpn.head import Head, HeadConfig
from mhfpn.model import Detector
from mhfpn.necks import VARIANTS, NeckConfig
from mhfpn.nn import Conv2d, Module
from mhfpn.tensor import add, pool2d, upsample_bilinear


def conv_params(c_in, c_out, k=3):
    return c_out * c_in * k * k + c_out


def conv_flops(c_in, c_out, ho, wo, k=3):
    return 2 * c_out * c_in * k * k * ho * wo + c_out * ho * wo


class PoolUp(Module):
    """conv -> maxpool /2 -> conv -> upsample x2 -> add skip."""

    def __init__(self):
        self.a = Conv2d(2, 4, 3)
        self.b = Conv2d(4, 4, 1)
        self.init_parameters(0)

    def forward(self, x):
        y = self.a(x)
        z = upsample_bilinear(self.b(pool2d(y, 2, "max")), 2)
        return add(y, z)


def test_single_conv_fixture():
    conv = Conv2d(3, 8, 3)
    assert count_params(conv) == 224 == conv_params(3, 8)
    # 3x3 with padding 1 keeps the 4x4 map: MACs 8*3*9*16 = 3456
    assert count_flops(conv, (1, 3, 4, 4)) == 2 * 3456 + 8 * 16 == 7040


def test_pool_up_fixture():
    m = PoolUp()
    assert count_params(m) == conv_params(2, 4) + conv_params(4, 4, 1)
    expected = {
        "conv2d": conv_flops(2, 4, 8, 8) + conv_flops(4, 4, 4, 4, k=1),
        "pool2d": 4 * 4 * 4,
        "upsample": 4 * 8 * 8,
        "add": 4 * 8 * 8,
    }
    assert flop_breakdown(m, (1, 2, 8, 8)) == expected


def test_backbone_fixture():
    cfg = BackboneConfig()
    bb = Backbone(cfg)
    c = (cfg.stem_channels,) + cfg.stage_channels
    params = conv_params(1, c[0]) + conv_params(c[0], c[1])
    flops = conv_flops(1, c[0], 32, 32) + conv_flops(c[0], c[1], 16, 16)
    side = 16
    for c_in, c_out in zip(c[1:], c[2:]):
        side //= 2
        params += conv_params(c_in, c_out) + conv_params(c_out, c_out)
        flops += conv_flops(c_in, c_out, side, side) + conv_flops(c_out, c_out, side, side) + c_out * side * side
    assert count_params(bb) == params
    assert count_flops(bb, (1, 1, 64, 64)) == flops


def test_head_fixture():
    head = Head(32, HeadConfig(num_convs=2))
    assert count_params(head) == 2 * conv_params(32, 32) + conv_params(32, 1) + conv_params(32, 4)


def test_flops_scale_with_batch():
    conv = Conv2d(3, 8, 3)
    assert count_flops(conv, (3, 3, 4, 4)) == 3 * 7040


@pytest.fixture(scope="module")
def detectors():
    return {v: Detector(BackboneConfig(), NeckConfig(variant=v), HeadConfig()) for v in VARIANTS}


def test_param_ordering_full_models(detectors):
    p = {v: count_params(m) for v, m in detectors.items()}
    assert p["MHFPN"] > p["HRFPN"] >= p["FPN"]
    assert p["MHFPN"] - p["FPN"] > 0
    # everything outside the neck is shared
    assert len({p[v] - count_params(m.neck) for v, m in detectors.items()}) == 1


def test_flops_positive_and_deterministic(detectors):
    for m in detectors.values():
        a = count_flops(m, (1, 1, 64, 64))
        assert a > 0 and a == count_flops(m, (1, 1, 64, 64))
    assert count_flops(detectors["MHFPN"], (1, 1, 64, 64)) > count_flops(detectors["FPN"], (1, 1, 64, 64))


def test_counting_leaves_no_side_effects():
    conv = Conv2d(3, 8, 3)
    conv.init_parameters(1)
    before = conv.weight.data.copy()
    count_flops(conv, (1, 3, 4, 4))
    np.testing.assert_array_equal(conv.weight.data, before)
