"""Dense tensors with a reverse-mode tape.

Layout convention used across the package: a volume is ``C x D x H x W``
(channels-major, then depth, height, width). There is no batch axis; the
training protocol uses batch size 1 throughout.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient::

    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    x.grad  # -> 2 * x
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_CHECK_FINITE = True
_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default storage precision."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_finite_check(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def accumulation_dtype(*dtypes) -> np.dtype:
    """Higher active precision: float64 whenever any operand or the default is float64.

    Convolutions and surrogate gradients always accumulate in float64; this helper
    is used where the policy is the wider of the participating dtypes.
    """
    return np.result_type(_DEFAULT_DTYPE, *dtypes)


def _check(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in output")


class Tensor:
    """A dense array of real values with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
            # numpy scalars (e.g. a 0-d array times a float) keep their precision
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not (isinstance(x, (np.ndarray, np.floating)) and x.dtype.kind == "f"):
        dtype = _DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------
@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Node ids are assigned in creation order, so every input id precedes the
    node that consumes it and a single reverse sweep is a valid topological
    traversal.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._tensors: list[Tensor] = []
        self._index: dict[int, int] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tape stack corrupted"

    def _id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._index.get(key)
        if nid is None:
            nid = len(self._tensors)
            self._tensors.append(t)
            self._index[key] = nid
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        in_ids = tuple(self._id(t) for t in inputs)
        out_id = self._id(output)
        output.node_id = out_id
        self._produced.add(out_id)
        self.nodes.append(Node(op, in_ids, out_id, backward))

    def __len__(self) -> int:
        return len(self.nodes)

    def _sweep(self, output: Tensor, seed: np.ndarray | None) -> dict[int, np.ndarray]:
        if id(output) not in self._index:
            raise ValueError("output tensor was not produced on this tape")
        if seed is None:
            if output.size != 1:
                raise ValueError("backward from a non-scalar output needs an explicit seed gradient")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {self._index[id(output)]: np.asarray(seed, dtype=output.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for nid, ig in zip(node.inputs, in_grads):
                if ig is None or not self._tensors[nid].requires_grad:
                    continue
                prev = grads.get(nid)
                grads[nid] = ig if prev is None else prev + ig
        return grads

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        grads = self._sweep(output, seed)
        for nid, g in grads.items():
            if nid in self._produced:
                continue
            t = self._tensors[nid]
            if not t.requires_grad:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
            if not np.isfinite(t.grad).all():
                raise NonFiniteError(f"non-finite gradient for {t.name or 'tensor'}")

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` w.r.t. ``wrt`` without touching ``.grad``."""
        grads = self._sweep(output, seed)
        out = []
        for t in wrt:
            nid = self._index.get(id(t))
            g = grads.get(nid) if nid is not None else None
            out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
        return out


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Evaluate without recording onto any tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if any input needs grad."""
    _check(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise suite
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0 (one-sided subgradient)."""
    a = as_tensor(a)
    if (a.data < 0).any():
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
        return (g * d,)

    return make_result("sqrt", out, (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_result("log", out, (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    from scipy.special import expit

    a = as_tensor(a)
    out = expit(a.data)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    out = np.where(mask, a.data, lo).astype(a.dtype, copy=False)
    return make_result("clamp_min", out, (a,), lambda g: (g * mask,))


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[i] for i in axes]))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if _reduced_count(a.shape, axis) == 0:
        raise ValueError("sum over an empty reduction axis")
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result("sum", out, (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = _reduced_count(a.shape, axis)
    if n == 0:
        raise ValueError("mean over an empty reduction axis")
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def astype(a, dtype) -> Tensor:
    """Precision cast; the gradient is cast back to the source dtype."""
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    src = a.dtype
    return make_result("astype", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _has_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return make_result("getitem", np.array(a.data[index]), (a,), back)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return make_result("concat", np.concatenate([t.data for t in ts], axis=axis), ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(ts))

    return make_result("stack", np.stack([t.data for t in ts], axis=axis), ts, back)
