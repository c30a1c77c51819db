"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the calling thread's active
tape. ``backward`` replays the tape in reverse, accumulates gradients into the
``grad`` slot of every leaf that requires them, and clears the tape.

Broadcasting is limited to what the models and losses need: the second
operand of ``add``/``sub``/``mul`` may match the trailing dimensions of the
first (bias rows).
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, ParameterError, RankError, StateError

NORM_EPS = 1e-12

_state = threading.local()
_debug = os.environ.get("CLKD_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Assert finiteness after every operation (slow; for tracking down NaNs)."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced NaN or Inf")
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor._result(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: Node) -> None:
        node.output._tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def get_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _op(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._result(data, track)
    if track:
        tape.record(Node(inputs, out, backward))
    return out


def backward(loss: Tensor) -> None:
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    if loss._tape is not None and loss._tape is not tape:
        raise StateError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp.is_leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.reshape(g, leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.clear()


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        return _op(a.data + b, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _op(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _op(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _op(x * x, (a,), lambda g: (2.0 * g * x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _op(np.abs(x), (a,), lambda g: (g * np.sign(x),))


# --------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _op(a.data.sum(axis=ax), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def frobenius_norm_sq(a: Tensor) -> Tensor:
    x = a.data
    return _op(np.asarray(np.sum(x * x)), (a,), lambda g: (2.0 * g * x,))


# --------------------------------------------------------------------------
# shape / linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _op(ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise RankError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    return _op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _require_2d(x: Tensor, name: str) -> None:
    if x.ndim != 2:
        raise RankError(f"{name} needs a 2-D tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# row-wise probability / normalisation


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    _require_2d(x, "softmax_rows")
    t = float(temperature)
    z = x.data / t
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)) / t,)

    return _op(s, (x,), bw)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    _require_2d(x, "log_softmax_rows")
    t = float(temperature)
    z = x.data / t
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    s = np.exp(out)

    def bw(g):
        return ((g - s * g.sum(axis=1, keepdims=True)) / t,)

    return _op(out, (x,), bw)


def l2_normalize_rows(x: Tensor, epsilon: float = NORM_EPS) -> Tensor:
    """Divide every row by ``max(||row||_2, epsilon)``."""
    _require_2d(x, "l2_normalize_rows")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    guarded = norms < epsilon
    denom = np.where(guarded, epsilon, norms)
    y = x.data / denom

    def bw(g):
        proj = np.where(guarded, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _op(y, (x,), bw)


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. ``x`` is (B, Cin, H, W), ``w`` is (Cout, Cin, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise RankError(f"conv2d needs 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    k = w.shape[2]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, w.shape[3]), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    H, W = out.shape[2], out.shape[3]
    wd = w.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(wd.shape[3]):
                    gxp[:, :, i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]]
        if w.requires_grad:
            gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _op(out, inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise RankError(f"global_avg_pool needs a 4-D tensor, got shape {x.shape}")
    shape = x.shape
    n = shape[2] * shape[3]
    return _op(x.data.mean(axis=(2, 3)), (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / n, shape).copy(),))
