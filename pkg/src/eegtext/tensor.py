"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only numpy array. Every operation on tensors
that require gradients records its parents and a closure mapping the output
gradient to input gradients. The graph reachable from a scalar root is the
tape for one forward pass; :func:`backward` walks it in reverse topological
order and releases it afterwards.

Composite layers elsewhere in the package register their own fused
operations through :meth:`Tensor.from_op`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DomainError",
    "NonFiniteError",
    "GraphError",
    "as_tensor",
    "backward",
    "concat",
    "finite_diff",
    "relative_error",
    "elementwise",
    "matmul",
]


class DomainError(ValueError):
    """Raised when an input falls outside an operation's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or infinite values."""


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (non-scalar root, freed tape)."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_FLOAT_TYPES = (np.float32, np.float64)


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")
    arr.flags.writeable = False
    return arr


class Tensor:
    """An immutable n-d array that can take part in gradient computation.

    Parameters
    ----------
    data : array_like
        Values, copied on construction.
    requires_grad : bool
        Whether gradients flow to this tensor.
    dtype : numpy dtype, optional
        ``float64`` (gradient checks) or ``float32`` (training). Defaults to
        the input's float type, else ``float64``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100  # make ``ndarray + Tensor`` defer to Tensor.__radd__

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = getattr(data, "dtype", None)
            if dtype not in _FLOAT_TYPES:
                dtype = np.float64
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.size == 0:
            raise ValueError("tensor extents must be positive")
        self.data = _checked(arr, "constructor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Iterable["Tensor"],
                backward_fn: BackwardFn, op: str) -> "Tensor":
        """Wrap the output of a primitive.

        ``backward_fn(g)`` must return one gradient (or None) per parent, in
        the same order and with the parents' shapes.
        """
        parents = tuple(parents)
        out = cls.__new__(cls)
        out.data = _checked(np.asarray(data), op)
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
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
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        e = float(exponent)
        x = self.data
        if e != int(e) and (x < 0).any():
            raise DomainError("fractional power of a negative value")
        if e < 0 and (x == 0).any():
            raise DomainError("negative power of zero")
        out = x ** e

        def bw(g):
            return (g * e * x ** (e - 1.0),)

        return Tensor.from_op(out, (self,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    # reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(out, (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def bw(g):
            return (g.reshape(old),)

        return Tensor.from_op(self.data.reshape(shape), (self,), bw, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))

        def bw(g):
            return (g.transpose(inv),)

        return Tensor.from_op(self.data.transpose(axes), (self,), bw, "transpose")

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        shape = self.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(self.data[index], (self,), bw, "getitem")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {"neg", "exp", "log", "tanh", "sigmoid"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply an elementwise primitive.

    ``kind`` is one of ``add sub mul div`` (binary, numpy broadcasting) or
    ``neg exp log tanh sigmoid`` (unary). Plain numbers and arrays are
    promoted to constant tensors of the other operand's dtype.
    """
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes one operand")
        a = as_tensor(a)
        x = a.data
        if kind == "neg":
            return Tensor.from_op(-x, (a,), lambda g: (-g,), kind)
        if kind == "exp":
            with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError
                out = np.exp(x)
            return Tensor.from_op(out, (a,), lambda g: (g * out,), kind)
        if kind == "log":
            if (x <= 0).any():
                raise DomainError("log of a non-positive value")
            return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,), kind)
        if kind == "tanh":
            out = np.tanh(x)
            return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), kind)
        out = _sigmoid(x)
        return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), kind)

    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if b is None:
        raise TypeError(f"{kind} takes two operands")
    ref = a if isinstance(a, Tensor) else b
    dtype = ref.dtype if isinstance(ref, Tensor) else None
    a, b = as_tensor(a, dtype), as_tensor(b, dtype)
    x, y = a.data, b.data
    try:
        out_shape = np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ValueError(f"shapes {x.shape} and {y.shape} are not broadcastable") from None
    sa, sb = x.shape, y.shape

    if kind == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
    elif kind == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    elif kind == "mul":
        out = x * y

        def bw(g):
            return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)
    else:
        if (y == 0).any():
            raise DomainError("division by zero")
        out = x / y

        def bw(g):
            return _unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)

    assert out.shape == out_shape
    return Tensor.from_op(out, (a, b), bw, kind)


def matmul(a, b) -> Tensor:
    """Matrix product of 2-d tensors (leading batch dims on ``a`` allowed)."""
    ref = a if isinstance(a, Tensor) else b
    a, b = as_tensor(a, ref.dtype), as_tensor(b, ref.dtype)
    x, y = a.data, b.data
    if y.ndim != 2 or x.ndim < 2 or x.shape[-1] != y.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")
    out = x @ y

    def bw(g):
        gx = g @ y.T
        gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gy

    return Tensor.from_op(out, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in tensors]
    ax = axis % arrays[0].ndim
    for arr in arrays[1:]:
        if arr.ndim != arrays[0].ndim or any(
            arr.shape[i] != arrays[0].shape[i] for i in range(arr.ndim) if i != ax
        ):
            raise ValueError("concat: non-concatenated extents differ")
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor.from_op(out, tensors, bw, "concat")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``root``.

    Populates ``.grad`` on every reachable leaf with ``requires_grad`` and
    returns the same gradients as a ``{leaf: grad}`` map. The graph behind
    ``root`` is released afterwards.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root.op == "freed":
        raise GraphError("this graph was already consumed by backward()")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad and node.op != "freed":
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if pg.shape != p.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} != {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
            node.op = "freed"
    return leaves


def finite_diff(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a perturbed float64 copy of ``x`` and must return a number.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x.copy()))
        flat[i] = orig - step
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)``, the metric used for gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
