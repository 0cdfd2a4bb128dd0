"""Small deterministic tensor engine with reverse- and forward-mode derivatives.

Every operation computes its primal value with numpy, propagates a tangent
when any input carries one (forward mode, dual numbers), and records a
pullback on the active tape when any input is being watched (reverse mode).
Tapes are per call and thread-confined.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from mmdistill.params import DualParamVector, ParamVector


class ShapeError(ValueError):
    """Raised when an input or cotangent does not match the expected shape."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional tangent channel.

    ``tangent`` holds the forward-mode directional derivative (same shape as
    ``data``) or ``None`` when the value does not depend on the seeded
    direction. ``watched`` marks participation in the active tape.
    """

    __slots__ = ("data", "tangent", "watched", "__weakref__")

    def __init__(self, data, tangent=None, watched: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=np.float64)
            if tangent.shape != self.data.shape:
                raise ShapeError(f"tangent shape {tangent.shape} != data shape {self.data.shape}")
        self.tangent = tangent
        self.watched = watched

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dual={self.tangent is not None}, watched={self.watched})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records pullbacks of watched operations; discarded after one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def watch(self, data) -> Tensor:
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.watched = True
        return t

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], pullback: Callable) -> None:
        self._records.append((out, inputs, pullback))

    def gradient(self, output: Tensor, cotangent, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Accumulate cotangent^T d(output)/d(source) for each source."""
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != output.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): cotangent}
        for out, inputs, pullback in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, pullback(g)):
                if gi is None or not inp.watched:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._records.clear()
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, inputs: tuple[Tensor, ...], tangent_fn, pullback) -> Tensor:
    tangent = None
    if any(x.tangent is not None for x in inputs):
        tangent = tangent_fn()
    watched = any(x.watched for x in inputs)
    out = Tensor(data, tangent, watched)
    if watched:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, pullback)
    return out


def _tan(x: Tensor) -> np.ndarray | float:
    return 0.0 if x.tangent is None else x.tangent


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(
        out, (a, b),
        lambda: np.broadcast_to(_tan(a) + _tan(b), out.shape).copy(),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(
        out, (a, b),
        lambda: np.broadcast_to(_tan(a) - _tan(b), out.shape).copy(),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out, (a, b),
        lambda: np.broadcast_to(_tan(a) * b.data + a.data * _tan(b), out.shape).copy(),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda: a.tangent * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def tangent():
        t = np.zeros_like(out)
        if a.tangent is not None:
            t += a.tangent @ b.data
        if b.tangent is not None:
            t += a.data @ b.tangent
        return t

    return _make(out, (a, b), tangent, lambda g: (g @ b.data.T, a.data.T @ g))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    deriv = sig * (1.0 + x.data * (1.0 - sig))
    return _make(out, (x,), lambda: deriv * x.tangent, lambda g: (g * deriv,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    deriv = 1.0 - out * out
    return _make(out, (x,), lambda: deriv * x.tangent, lambda g: (g * deriv,))


def sin(x: Tensor) -> Tensor:
    c = np.cos(x.data)
    return _make(np.sin(x.data), (x,), lambda: c * x.tangent, lambda g: (g * c,))


def cos(x: Tensor) -> Tensor:
    s = np.sin(x.data)
    return _make(np.cos(x.data), (x,), lambda: -s * x.tangent, lambda g: (-g * s,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda: 2.0 * x.data * x.tangent, lambda g: (2.0 * g * x.data,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    return _make(
        np.asarray(x.data.sum()), (x,),
        lambda: np.asarray(x.tangent.sum()),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        out, xs,
        lambda: np.concatenate([np.zeros_like(x.data) if x.tangent is None else x.tangent for x in xs], axis=axis),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)

    def pullback(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _make(table.data[index], (table,), lambda: table.tangent[index], pullback)


def straight_through(value: np.ndarray, surrogate: Tensor) -> Tensor:
    """Forward value ``value``; derivatives are those of ``surrogate``."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != surrogate.shape:
        raise ShapeError(f"straight-through value {value.shape} vs surrogate {surrogate.shape}")
    return _make(value, (surrogate,), lambda: surrogate.tangent.copy(), lambda g: (g,))


# ---------------------------------------------------------------------------
# network-level transforms


class Net(Protocol):
    """Anything with a parameter layout and a forward rule over Tensors."""

    def layout(self) -> list[tuple[str, tuple[int, ...]]]: ...

    def apply(self, params: dict[str, Tensor], x: Tensor) -> Tensor: ...


def _check_params(net: Net, params: ParamVector) -> None:
    expected = [(n, tuple(s)) for n, s in net.layout()]
    got = [(e.name, e.shape) for e in params.layout]
    if expected != got:
        raise ShapeError(f"parameter layout {got} does not match network layout {expected}")


def _param_tensors(params: ParamVector, tape: Tape | None = None, tangent: ParamVector | None = None):
    out = {}
    for entry in params.layout:
        t = Tensor(params[entry.name], None if tangent is None else tangent[entry.name])
        if tape is not None:
            tape.watch(t)
        out[entry.name] = t
    return out


def forward(net: Net, params: ParamVector, x) -> np.ndarray:
    """Evaluate the network; no tape, no tangent."""
    _check_params(net, params)
    return net.apply(_param_tensors(params), as_tensor(np.asarray(x, dtype=np.float64))).data.copy()


def linearize_params(net: Net, params: ParamVector, x):
    """Return ``(output, pullback)`` where ``pullback(c)`` is c^T d(output)/d(params)."""
    _check_params(net, params)
    with Tape() as tape:
        p = _param_tensors(params, tape)
        out = net.apply(p, Tensor(np.asarray(x, dtype=np.float64)))
    sources = [p[e.name] for e in params.layout]

    def pullback(cotangent) -> ParamVector:
        grads = tape.gradient(out, cotangent, sources)
        return ParamVector(np.concatenate([g.ravel() for g in grads]), params.layout)

    return out.data.copy(), pullback


def vjp(net: Net, params: ParamVector, x, cotangent) -> ParamVector:
    return linearize_params(net, params, x)[1](cotangent)


def jvp(net: Net, params: DualParamVector, x) -> np.ndarray:
    """Directional derivative of the output along ``params.tangent``."""
    _check_params(net, params.primal)
    p = _param_tensors(params.primal, tangent=params.tangent)
    out = net.apply(p, as_tensor(np.asarray(x, dtype=np.float64)))
    if out.tangent is None:
        return np.zeros_like(out.data)
    return out.tangent.copy()


def value_and_jvp(net: Net, params: DualParamVector, x) -> tuple[np.ndarray, np.ndarray]:
    _check_params(net, params.primal)
    p = _param_tensors(params.primal, tangent=params.tangent)
    out = net.apply(p, as_tensor(np.asarray(x, dtype=np.float64)))
    tan = np.zeros_like(out.data) if out.tangent is None else out.tangent.copy()
    return out.data.copy(), tan


def input_grad(net: Net, params: ParamVector, x, cotangent) -> np.ndarray:
    """c^T d(output)/d(input)."""
    _check_params(net, params)
    with Tape() as tape:
        xin = tape.watch(np.array(x, dtype=np.float64))
        out = net.apply(_param_tensors(params), xin)
    return tape.gradient(out, cotangent, [xin])[0]


# ---------------------------------------------------------------------------
# a plain MLP, used by tests and as the building block of the denoiser


ACTIVATIONS = {"silu": silu, "tanh": tanh}


@dataclass(frozen=True)
class MLP:
    """Fully connected net ``dims[0] -> ... -> dims[-1]`` with activations between layers."""

    dims: tuple[int, ...]
    activation: str = "silu"

    def __post_init__(self):
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ValueError(f"invalid MLP dims {self.dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layout(self):
        out = []
        for i, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            out += [(f"w{i}", (a, b)), (f"b{i}", (b,))]
        return out

    def apply(self, params, x):
        if x.data.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ShapeError(f"MLP expects input (batch, {self.dims[0]}), got {x.shape}")
        act = ACTIVATIONS[self.activation]
        h = x
        n = len(self.dims) - 1
        for i in range(n):
            h = h @ params[f"w{i}"] + params[f"b{i}"]
            if i < n - 1:
                h = act(h)
        return h

    def init(self, rng: np.random.Generator, zero_last: bool = False) -> ParamVector:
        pv = ParamVector.zeros(self.layout())
        n = len(self.dims) - 1
        for i, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            if zero_last and i == n - 1:
                continue
            pv[f"w{i}"] = rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))
        return pv
