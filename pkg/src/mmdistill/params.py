"""Flat parameter vectors and the MMD1 binary record format.

A ParamVector is one contiguous float64 array plus an ordered layout table,
so preconditioning, optimizer state and parameter-space steps are plain
vector arithmetic. See docs/formats.md for the byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"MMD1"


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def make_layout(spec: Iterable[tuple[str, tuple[int, ...]]]) -> tuple[Entry, ...]:
    entries, offset, seen = [], 0, set()
    for name, shape in spec:
        if name in seen:
            raise LayoutError(f"duplicate parameter name {name!r}")
        seen.add(name)
        e = Entry(name, tuple(int(d) for d in shape), offset)
        entries.append(e)
        offset += e.size
    return tuple(entries)


class ParamVector:
    """Flat float64 vector with named, contiguous, non-overlapping slices."""

    def __init__(self, data, layout):
        layout = tuple(layout)
        if layout and not isinstance(layout[0], Entry):
            layout = make_layout(layout)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 1:
            raise LayoutError("ParamVector data must be 1-D")
        offset = 0
        for e in layout:
            if e.offset != offset:
                raise LayoutError(f"entry {e.name!r} at offset {e.offset}, expected {offset}")
            offset += e.size
        if offset != data.size:
            raise LayoutError(f"layout covers {offset} values but data has {data.size}")
        self.data = data
        self.layout = layout
        self._index = {e.name: e for e in layout}

    @classmethod
    def zeros(cls, spec) -> "ParamVector":
        layout = make_layout(spec)
        n = sum(e.size for e in layout)
        return cls(np.zeros(n), layout)

    def __getitem__(self, name: str) -> np.ndarray:
        e = self._index[name]
        return self.data[e.offset:e.offset + e.size].reshape(e.shape)

    def __setitem__(self, name: str, value) -> None:
        e = self._index[name]
        self.data[e.offset:e.offset + e.size] = np.broadcast_to(np.asarray(value, dtype=np.float64), e.shape).ravel()

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"ParamVector(n={self.data.size}, entries={[e.name for e in self.layout]})"

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise LayoutError("parameter layouts differ")

    def like(self, data) -> "ParamVector":
        return ParamVector(np.asarray(data, dtype=np.float64).copy(), self.layout)

    def copy(self) -> "ParamVector":
        return self.like(self.data)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamVector)
            and self.layout == other.layout
            and np.array_equal(self.data, other.data)
        )

    # -- MMD1 serialization ---------------------------------------------------

    def write(self, f: BinaryIO) -> None:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(self.layout)))
        for e in self.layout:
            name = e.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", len(e.shape)))
            f.write(struct.pack(f"<{len(e.shape)}I", *e.shape))
        f.write(self.data.astype("<f8").tobytes())

    @classmethod
    def read(cls, f: BinaryIO) -> "ParamVector":
        magic = f.read(4)
        if magic != MAGIC:
            raise LayoutError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (n_entries,) = _unpack(f, "<I")
        spec = []
        for _ in range(n_entries):
            (name_len,) = _unpack(f, "<I")
            name = f.read(name_len).decode("utf-8")
            (rank,) = _unpack(f, "<I")
            dims = _unpack(f, f"<{rank}I") if rank else ()
            spec.append((name, tuple(dims)))
        layout = make_layout(spec)
        n = sum(e.size for e in layout)
        raw = f.read(8 * n)
        if len(raw) != 8 * n:
            raise LayoutError("truncated parameter data")
        return cls(np.frombuffer(raw, dtype="<f8").astype(np.float64), layout)


def _unpack(f: BinaryIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise LayoutError("truncated MMD1 record")
    return struct.unpack(fmt, raw)


@dataclass
class DualParamVector:
    primal: ParamVector
    tangent: ParamVector

    def __post_init__(self):
        if not self.primal.same_layout(self.tangent):
            raise LayoutError("primal and tangent layouts differ")
