"""Reverse-mode automatic differentiation over dense 0/1/2-D float64 arrays.

A :class:`Tensor` records the operation that produced it (define-by-run).
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph once in
reverse topological order and accumulates ``grad`` on every leaf that
``requires_grad``.

Broadcasting is deliberately limited to scalar/array pairs; anything else
raises :class:`~crystal_pirnn.errors.ShapeError` naming the operation.

The module-level helpers (:func:`exp`, :func:`where`, :func:`clamp_min`,
:func:`power`, :func:`value`) accept tensors *or* plain numbers/arrays so
that physics code can be written once for both.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "tensor", "make_node", "concat", "where", "exp", "log", "tanh",
    "sigmoid", "softplus", "clamp_min", "power", "square", "value", "gradcheck",
]


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"tensors are limited to rank 2, got shape {a.shape}")
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return _binary(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(_wrap(other), self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(_wrap(other), self, "div")

    def __neg__(self):
        return make_node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            return power(self, exponent)
        c = float(exponent)
        x = self.data
        if c != int(c) and np.any(x <= 0):
            raise ContractError("fractional power requires a strictly positive base")
        return make_node(x ** c, (self,), lambda g: (g * c * x ** (c - 1.0),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = self.data[idx]
        shape = self.data.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g) if _needs_add_at(idx) else full.__setitem__(idx, g)
            return (full,)

        return make_node(out, (self,), back, "slice")

    # -- reductions / elementwise as methods ------------------------------
    def sum(self, axis: int | None = None):
        shape = self.data.shape

        def back(g):
            if axis is None:
                return (np.full(shape, float(g)),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return make_node(self.data.sum(axis=axis), (self,), back, "sum")

    def mean(self, axis: int | None = None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        old = self.data.shape
        return make_node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self):
        return make_node(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)

    def abs(self):
        x = self.data
        return make_node(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def __abs__(self):
        return self.abs()

    def clamp_min(self, floor: float):
        return clamp_min(self, floor)

    # -- backward ---------------------------------------------------------
    def backward(self) -> int:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Returns the number of backward closures invoked (one per interior
        node that needs a gradient).
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        calls = 0
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            calls += 1
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return calls


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Create a graph node; ``backward(g)`` returns one gradient per parent.

    The node is only recorded when some parent requires a gradient.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.reshape(g.sum(), shape)


def _check_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _binary(a, b, op: str) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data
    _check_shapes(x, y, op)
    sx, sy = x.shape, y.shape
    if op == "add":
        return make_node(x + y, (a, b), lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)), op)
    if op == "sub":
        return make_node(x - y, (a, b), lambda g: (_unbroadcast(g, sx), _unbroadcast(-g, sy)), op)
    if op == "mul":
        return make_node(x * y, (a, b),
                         lambda g: (_unbroadcast(g * y, sx), _unbroadcast(g * x, sy)), op)
    out = x / y
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / y, sx), _unbroadcast(-g * out / y, sy)), "div")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data
    if x.ndim == 0 or y.ndim == 0 or x.shape[-1] != y.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")

    def back(g):
        gx = g @ y.T if y.ndim == 2 else np.outer(g, y) if x.ndim == 2 else g * y
        if x.ndim == 2:
            gy = x.T @ g if g.ndim == 2 else x.T @ g
        else:
            gy = np.outer(x, g) if g.ndim == 1 else x * g
        return gx, gy

    return make_node(x @ y, (a, b), back, "matmul")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    arrays = [t.data for t in ts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return make_node(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds else ``b``; ``cond`` is not differentiated."""
    cond = np.asarray(cond, dtype=bool)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        out = np.where(cond, a, b)
        return out if out.ndim else out[()]
    a, b = _wrap(a), _wrap(b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return make_node(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                                             _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    d = x.data
    if np.any(d <= 0):
        raise ContractError("log of a non-positive value")
    return make_node(np.log(d), (x,), lambda g: (g / d,), "log")


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    if not isinstance(x, Tensor):
        return _sigmoid(x)
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x):
    if not isinstance(x, Tensor):
        return np.logaddexp(0.0, x)
    d = x.data
    return make_node(np.logaddexp(0.0, d), (x,), lambda g: (g * _sigmoid(d),), "softplus")


def clamp_min(x, floor: float):
    """max(x, floor); the gradient is passed only where x > floor."""
    if not isinstance(x, Tensor):
        return np.maximum(x, floor)
    d = x.data
    keep = d > floor
    return make_node(np.where(keep, d, floor), (x,), lambda g: (np.where(keep, g, 0.0),), "clamp_min")


def square(x):
    if not isinstance(x, Tensor):
        return np.square(x)
    d = x.data
    return make_node(d * d, (x,), lambda g: (2.0 * g * d,), "square")


def power(base, exponent):
    """base ** exponent for a positive base; the exponent may be a tensor."""
    if not isinstance(base, Tensor) and not isinstance(exponent, Tensor):
        return np.power(base, exponent)
    if not isinstance(exponent, Tensor):
        return _wrap(base) ** float(exponent)
    return exp(exponent * log(_wrap(base)))


def value(x):
    """Underlying numeric value of a tensor, or ``x`` unchanged."""
    return x.data if isinstance(x, Tensor) else x


def gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max component-wise relative error between reverse mode and central differences.

    The error is |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
    """
    x0 = np.array(value(x), dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    g_ad = np.zeros_like(x0) if probe.grad is None else probe.grad
    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - eps
        down = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        g_fd.reshape(-1)[i] = (up - down) / (2.0 * eps)
    err = np.abs(g_ad - g_fd) / (np.abs(g_ad) + np.abs(g_fd) + 1e-12)
    return float(err.max()) if err.size else 0.0
