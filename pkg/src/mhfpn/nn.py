"""Parameters, a small Module base class and the Conv2d layer."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from mhfpn.tensor import Tensor, conv2d, relu


INIT_SCHEMES = ("scaled", "uniform")


class Parameter(Tensor):
    """A gradient-tracking tensor owned by a module."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, parameter path); stable across runs and processes."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))


class Module:
    """Attribute-walking container, in the spirit of torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            items = enumerate(value) if isinstance(value, (list, tuple)) else [(None, value)]
            for i, item in items:
                if isinstance(item, Module):
                    path = f"{prefix}{key}" if i is None else f"{prefix}{key}.{i}"
                    yield from item.named_modules(path + ".")

    def init_parameters(self, seed: int, scheme: str = "scaled") -> None:
        """Re-draw every weight uniformly in +-gain * sqrt(1 / fan_in); biases start at zero.

        ``scheme="uniform"`` uses gain 1. ``scheme="scaled"`` keeps activation
        variance roughly constant through depth: gain sqrt(6) for a conv followed
        by relu, sqrt(3) for a linear one.
        """
        if scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
        gains = {}
        if scheme == "scaled":
            for path, m in self.named_modules():
                if isinstance(m, Conv2d):
                    gains[f"{path}.weight" if path else "weight"] = np.sqrt(6.0 if m.act else 3.0)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.data = np.zeros(p.shape)
            else:
                fan_in = int(np.prod(p.shape[1:])) if p.data.ndim > 1 else 1
                bound = gains.get(name, 1.0) * np.sqrt(1.0 / fan_in)
                p.data = param_rng(seed, name).uniform(-bound, bound, size=p.shape)

    def zero_(self) -> None:
        for p in self.parameters():
            p.data = np.zeros(p.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 bias: bool = True, act: bool = False):
        self.weight = Parameter(np.zeros((c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        return relu(y) if self.act else y
