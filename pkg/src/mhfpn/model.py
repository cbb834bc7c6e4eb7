"""Backbone + neck + head, and the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mhfpn.backbone import Backbone, BackboneConfig
from mhfpn.head import Head, HeadConfig, LevelOutput, head_forward
from mhfpn.necks import Neck, NeckConfig, neck_forward
from mhfpn.nn import Module
from mhfpn.tensor import Tensor

CHECKPOINT_MAGIC = b"MHFPNCK1"


class Detector(Module):
    def __init__(self, backbone: BackboneConfig, neck: NeckConfig, head: HeadConfig):
        self.backbone = Backbone(backbone)
        self.neck = Neck(backbone.stage_channels, neck)
        self.head = Head(neck.out_channels, head)

    def forward(self, image: Tensor) -> list[LevelOutput]:
        return head_forward(neck_forward(self.backbone(image), self.neck), self.head)


def save_checkpoint(model: Module, path: str | Path) -> None:
    """Magic, parameter count, then per parameter: name, shape, little-endian float64 values."""
    params = list(model.named_parameters())
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}q", *p.shape))
        chunks.append(p.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", buf, pos)
        pos += 8 * ndim
        count = int(np.prod(shape))
        state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return state


def load_checkpoint(model: Module, path: str | Path) -> None:
    model.load_state_dict(read_checkpoint(path))
