"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Leaves that
need gradients are created with :meth:`Tape.watch` inside an active tape; any
op touching a taped tensor appends a node to that tape. Tensors that never
touch a tape are plain constants and cost nothing to differentiate.

    >>> with Tape() as tape:
    ...     x = tape.watch([1.0, -2.0, 3.0])
    ...     y = sq_norm(x)
    >>> tape.backward(y)[x.node].data
    array([ 2., -4.,  6.])

Only scalar/tensor broadcasting is supported. Second derivatives are not.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "active_tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matvec",
    "tanh",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "total",
    "mean",
    "weighted_sum",
    "sq_norm",
    "norm",
    "channel",
    "reshape",
    "backward",
    "finite_diff_check",
]


class AutodiffError(Exception):
    """Base class for errors raised by the tape machinery."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape entered on this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


@dataclass(frozen=True)
class _Node:
    op: str
    inputs: tuple
    vjp: Optional[Callable[[np.ndarray], tuple]]
    shape: tuple


class Tensor:
    """A float64 array with an optional tape-node id.

    ``node`` is None for constants. The array is never mutated by any op; it is
    marked read-only on construction to keep it that way.
    """

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, node: Optional[int] = None, tape: Optional["Tape"] = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, node=None, tape=None) -> "Tensor":
        # internal fast path: arr is freshly computed by an op and owned here
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.node = node
        out.tape = tape
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __rmatmul__ = lambda self, other: matvec(other, self)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape is single-use by convention: build it, call :meth:`backward` once or
    more, then drop it. Nodes are appended in construction order, so an input
    id always precedes the node that consumes it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: tuple, vjp, shape: tuple) -> int:
        self.nodes.append(_Node(op, inputs, vjp, shape))
        return len(self.nodes) - 1

    def watch(self, data: ArrayLike) -> Tensor:
        """Create a leaf tensor that gradients are reported for."""
        if isinstance(data, Tensor):
            data = data.data
        t = Tensor(data)
        t.node = self._push("leaf", (), None, t.shape)
        t.tape = self
        return t

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def backward(self, root: Tensor) -> dict[int, Tensor]:
        """Gradients of the scalar ``root`` w.r.t. every leaf on this tape.

        Returns a map from leaf node id to a constant Tensor of the leaf's
        shape; leaves that do not influence ``root`` get zeros.
        """
        if root.size != 1:
            raise AutodiffError(f"backward: root must be a scalar, got shape {root.shape}")
        if root.node is None or root.tape is not self or root.node >= len(self.nodes):
            raise AutodiffError("backward: root was not produced on this tape")
        # fan-in is accumulated as an unevaluated (hi, lo) sum and rounded once,
        # so the result does not depend on the order contributions arrive in
        acc: dict[int, list] = {root.node: [np.ones(root.shape), None]}
        # gradients may overflow without the forward pass doing so; callers check finiteness
        with np.errstate(over="ignore", invalid="ignore"):
            self._sweep(root.node, acc)
        out = {}
        for i in self.leaves():
            entry = acc.get(i)
            out[i] = Tensor._wrap(np.zeros(self.nodes[i].shape) if entry is None else _resolve(entry))
        return out

    def _sweep(self, start: int, acc: dict) -> None:
        for i in range(start, -1, -1):
            entry = acc.get(i)
            if entry is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            g = _resolve(entry)
            for j, gj in zip(node.inputs, node.vjp(g)):
                if j is None or gj is None:
                    continue
                if j in acc:
                    _accumulate(acc[j], gj)
                else:
                    acc[j] = [gj, None]


def _accumulate(entry: list, g: np.ndarray) -> None:
    hi = entry[0]
    s = hi + g
    bp = s - hi
    err = (hi - (s - bp)) + (g - bp)  # exact rounding error of hi + g (Knuth TwoSum)
    entry[0] = s
    entry[1] = err if entry[1] is None else entry[1] + err


def _resolve(entry: list) -> np.ndarray:
    return entry[0] if entry[1] is None else entry[0] + entry[1]


def backward(root: Tensor) -> dict[int, Tensor]:
    """Run the reverse pass on the tape that produced ``root``."""
    if root.tape is None:
        raise AutodiffError("backward: root is a constant and was not produced on a tape")
    return root.tape.backward(root)


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap ``x`` as a constant unless it already is a Tensor.

    Read-only float64 arrays are wrapped without a copy or finiteness scan;
    their owner (frozen generator weights, op outputs) already guarantees both.
    """
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype == np.float64 and not x.flags.writeable:
        return Tensor._wrap(x)
    return Tensor(x)


def _tape_of(*ts: Tensor) -> Optional[Tape]:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise AutodiffError("operands belong to different tapes")
            tape = t.tape
    return tape


def _finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced NaN or Inf")
    return arr


def _record(op: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = _finite(op, out)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(t.node for t in inputs)
    return Tensor._wrap(out, tape._push(op, ids, vjp, out.shape), tape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


# -- elementwise binary ------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    x, y = a.data, b.data
    return _record("mul", x * y, (a, b),
                   lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    x, y = a.data, b.data
    if np.any(y == 0):
        raise DomainError("div: division by zero")
    out = x / y
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)))


def scale(a: ArrayLike, c: float) -> Tensor:
    """Multiply by a Python scalar (no gradient w.r.t. ``c``)."""
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matvec(m: ArrayLike, v: ArrayLike) -> Tensor:
    """Matrix (n, k) times vector (k,)."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError("matvec", m.shape, v.shape)
    M, x = m.data, v.data
    need_m = m.tape is not None

    def vjp(g):
        return (np.outer(g, x) if need_m else None, M.T @ g)

    return _record("matvec", M @ x, (m, v), vjp)


# -- elementwise unary -------------------------------------------------------


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form; exact 0.5 at 0
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


# -- reductions and structure ------------------------------------------------


def total(a: ArrayLike) -> Tensor:
    """Sum over all elements, returning a 0-d tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full(shape, float(g)),))


def weighted_sum(values: Sequence[ArrayLike], weights: Sequence[float]) -> Tensor:
    """Sum of ``w_i * v_i`` over scalar tensors, correctly rounded.

    The forward value is the exact rational dot product rounded once, so it is
    independent of term order.
    """
    vs = tuple(as_tensor(v) for v in values)
    ws = tuple(float(w) for w in weights)
    if len(vs) != len(ws) or not vs:
        raise ValueError("weighted_sum needs one weight per value and at least one value")
    for v in vs:
        if v.size != 1:
            raise ShapeError("weighted_sum", v.shape, ())
    exact = sum((Fraction(w) * Fraction(v.item()) for v, w in zip(vs, ws)), Fraction(0))
    return _record("weighted_sum", np.asarray(float(exact)), vs,
                   lambda g: tuple(np.full(v.shape, float(g) * w) for v, w in zip(vs, ws)))


def mean(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _record("mean", np.asarray(a.data.sum() / n), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def sq_norm(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("sq_norm", np.asarray(np.dot(x.ravel(), x.ravel())), (a,),
                   lambda g: (2.0 * float(g) * x,))


def norm(a: ArrayLike) -> Tensor:
    """Euclidean norm; its gradient at the origin is taken to be zero."""
    a = as_tensor(a)
    x = a.data
    r = math.sqrt(float(np.dot(x.ravel(), x.ravel())))

    def vjp(g):
        if r == 0.0:
            return (np.zeros_like(x),)
        return (float(g) / r * x,)

    return _record("norm", np.asarray(r), (a,), vjp)


def channel(a: ArrayLike, c: int) -> Tensor:
    """Slice channel ``c`` out of an (H, W, C) image."""
    a = as_tensor(a)
    if a.ndim != 3 or not 0 <= c < a.shape[2]:
        raise ShapeError("channel", a.shape, (c,))
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, :, c] = g
        return (out,)

    return _record("channel", np.ascontiguousarray(a.data[:, :, c]), (a,), vjp)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size or any(s <= 0 for s in shape):
        raise ShapeError("reshape", a.shape, shape)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- checking ----------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    The error per coordinate is ``|analytic - central| / max(1, |central|)``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    with Tape() as tape:
        leaf = tape.watch(x0)
        y = f(leaf)
    analytic = tape.backward(y)[leaf.node].data.ravel()
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("finite_diff_check: gradient is not finite")

    def value(arr):
        v = as_tensor(f(Tensor(arr))).item()
        if not math.isfinite(v):
            raise NonFiniteError("finite_diff_check: f returned a non-finite value")
        return v

    flat = x0.ravel()
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        central = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - central) / max(1.0, abs(central)))
    return worst
