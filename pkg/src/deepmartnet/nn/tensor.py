"""Dense double-precision tensors with define-by-run reverse-mode AD.

Every operation on a :class:`Tensor` that depends on a trainable leaf records
its parents and a closure computing the vector-Jacobian product.  The graph is
rebuilt on every evaluation; :meth:`Tensor.backward` walks it once in reverse
topological order.

The primitive set is deliberately small: elementwise arithmetic, scalar
powers, matmul and a fused affine map, sum/mean, reshape/slice/gather, and the
activations the networks need (tanh, tanh-approximated GELU, powered ReLU).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from ..errors import InvalidInput

GELU_K = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents: tuple[Tensor, ...], vjp) -> Tensor:
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise InvalidInput("only scalar exponents are supported")
        p = float(exponent)
        x = self.data
        if not p.is_integer() and np.any(x < 0):
            raise ArithmeticError(f"fractional power {p} of a negative base")
        out = x**p
        return Tensor._make(out, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        x_shape = self.shape
        out = self.data[key]

        # basic slices never alias, so plain assignment is enough for them
        basic = _is_basic_index(key)

        def vjp(g):
            full = np.zeros(x_shape)
            if basic:
                full[key] = g
            else:
                np.add.at(full, key, g)
            return (full,)

        return Tensor._make(out, (self,), vjp)

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        x_shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x_shape).copy(),)

        return Tensor._make(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x_shape = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(x_shape),))

    @property
    def T(self) -> Tensor:
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def square(self) -> Tensor:
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,))

    def abs(self) -> Tensor:
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def tanh(self) -> Tensor:
        t = np.tanh(self.data)
        return Tensor._make(t, (self,), lambda g: (g * (1.0 - t * t),))

    def sinh(self) -> Tensor:
        x = self.data
        return Tensor._make(np.sinh(x), (self,), lambda g: (g * np.cosh(x),))

    def exp(self) -> Tensor:
        e = np.exp(self.data)
        return Tensor._make(e, (self,), lambda g: (g * e,))

    def gelu_tanh(self) -> Tensor:
        x = self.data
        t = np.tanh(GELU_K * (x + GELU_A * (x * x * x)))
        out = 0.5 * x * (1.0 + t)

        def vjp(g):
            dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

        return Tensor._make(out, (self,), vjp)

    def relu_pow(self, p: int) -> Tensor:
        if p < 1 or int(p) != p:
            raise InvalidInput(f"ReluPow needs an integer power >= 1, got {p}")
        p = int(p)
        r = np.maximum(self.data, 0.0)
        if p == 1:
            return Tensor._make(r, (self,), lambda g: (g * (r > 0),))
        rp1 = ipow(r, p - 1)
        return Tensor._make(rp1 * r, (self,), lambda g: (g * p * rp1,))

    # -- reverse pass -------------------------------------------------------------

    def backward(self) -> dict[Tensor, np.ndarray]:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every trainable leaf.

        Returns the same gradients as a mapping keyed by leaf tensor.
        """
        if self.data.size != 1:
            raise InvalidInput(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                    leaves[node] = node.grad
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves

    def zero_grad(self) -> None:
        self.grad = None


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


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in items)


def ipow(x: np.ndarray, p: int) -> np.ndarray:
    """x**p for integer p >= 0 by repeated squaring (np.power is an order of magnitude slower)."""
    out = None
    base = x
    while p:
        if p & 1:
            out = base.copy() if out is None else out * base
        p >>= 1
        if p:
            base = base * base
    return np.ones_like(x) if out is None else out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise InvalidInput(f"matmul shape mismatch {x.shape} @ {y.shape}")
    return Tensor._make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def linear(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` as one recorded node."""
    x = as_tensor(x)
    xd, w = x.data, weight.data
    if xd.ndim != 2 or xd.shape[1] != w.shape[1]:
        raise InvalidInput(f"input has {xd.shape[-1]} columns, layer expects {w.shape[1]}")

    def vjp(g):
        gx = g @ w if x.requires_grad else None
        return gx, g.T @ xd, g.sum(axis=0)

    return Tensor._make(xd @ w.T + bias.data, (x, weight, bias), vjp)


def take(x: Tensor, index) -> Tensor:
    """Gather entries of a flattened tensor: ``out = x.ravel()[index]``."""
    index = np.asarray(index, dtype=np.intp)
    x_shape, n = x.shape, x.data.size
    out = x.data.reshape(-1)[index]

    def vjp(g):
        full = np.bincount(index.ravel(), weights=g.ravel(), minlength=n)
        return (full.reshape(x_shape),)

    return Tensor._make(out, (x,), vjp)


def stack_scalars(items: Iterable[Tensor]) -> Tensor:
    """Concatenate scalar tensors into a 1-D tensor."""
    items = [as_tensor(t) for t in items]
    out = np.array([t.data.reshape(()) for t in items], dtype=np.float64)

    def vjp(g):
        return tuple(g[j].reshape(items[j].shape) for j in range(len(items)))

    return Tensor._make(out, tuple(items), vjp)


def tanh(x: Tensor) -> Tensor:
    return as_tensor(x).tanh()


def gelu_tanh(x: Tensor) -> Tensor:
    return as_tensor(x).gelu_tanh()


def relu_pow(x: Tensor, p: int) -> Tensor:
    return as_tensor(x).relu_pow(p)
