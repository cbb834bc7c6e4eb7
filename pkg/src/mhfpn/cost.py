"""Parameter and FLOP accounting.

FLOP convention: a convolution costs ``2 * MACs`` plus one add per output
element for its bias, with ``MACs = C_out * C_in * kH * kW * H_out * W_out``.
Pooling, bilinear upsampling and elementwise addition cost one FLOP per
output element. Activations, concatenation and the head's ``exp`` are free.
"""

from __future__ import annotations

import numpy as np

from mhfpn.nn import Module
from mhfpn.tensor import Tensor, count_flops_of, no_grad


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def flop_breakdown(model: Module, input_shape: tuple[int, ...]) -> dict[str, int]:
    with no_grad(), count_flops_of() as counter:
        model(Tensor(np.zeros(input_shape)))
    return dict(counter)


def count_flops(model: Module, input_shape: tuple[int, ...]) -> int:
    """FLOPs of one forward pass, found by running it on zeros."""
    return int(sum(flop_breakdown(model, input_shape).values()))
