"""Checkpoint files: MMD1 parameter record, JSON metadata, optional Adam second moment."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

from mmdistill.denoiser import ArchDescriptor
from mmdistill.params import LayoutError, ParamVector


@dataclass
class Checkpoint:
    arch: ArchDescriptor
    params: ParamVector
    second_moment: ParamVector | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {"arch": ckpt.arch.to_dict(), **ckpt.meta}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        ckpt.params.write(f)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<B", ckpt.second_moment is not None))
        if ckpt.second_moment is not None:
            ckpt.second_moment.write(f)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        params = ParamVector.read(f)
        (n,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(n).decode("utf-8"))
        flag = f.read(1)
        if len(flag) != 1:
            raise LayoutError(f"{path}: truncated checkpoint")
        v = ParamVector.read(f) if flag[0] else None
    arch = ArchDescriptor.from_dict(meta.pop("arch"))
    expected = [(n, tuple(s)) for n, s in arch.layout()]
    if [(e.name, e.shape) for e in params.layout] != expected:
        raise LayoutError(f"{path}: parameter layout does not match stored architecture")
    return Checkpoint(arch, params, v, meta)
