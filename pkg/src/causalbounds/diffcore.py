"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape` whenever at least one operand requires a gradient.  Outside a
tape the same functions evaluate eagerly without bookkeeping, which is what
inference code relies on.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum(square(x))
    ...     tape.backward(y)
    >>> float(x.grad[0])
    6.0
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "relu",
    "sum",
    "mean",
    "square",
    "absolute",
    "scale",
    "concat",
    "maximum",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "reshape",
    "transpose",
    "index",
    "take_along",
    "cumsum",
    "where",
    "solve",
    "logdet",
    "backward",
    "gradient_check",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class Tensor:
    """Dense float64 array with an attached gradient buffer."""

    __slots__ = ("value", "_grad", "requires_grad", "node_id")
    # make ``ndarray op Tensor`` defer to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self._grad = None
        self.requires_grad = requires_grad
        self.node_id = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so parents always precede
    children and a reverse sweep is a valid backward order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, parents: tuple, vjp: Callable) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append((out, parents, vjp))

    def zero_grad(self) -> None:
        for out, parents, _ in self.nodes:
            out._grad = None
            for p in parents:
                p._grad = None

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(t) into ``t.grad`` for every recorded ancestor."""
        if output.value.size != 1:
            raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
        if not output.requires_grad:
            return
        adj = {id(output): np.ones_like(output.value)}
        touched = {id(output): output}
        for i in range(output.node_id, -1, -1):
            out, parents, vjp = self.nodes[i]
            g = adj.get(id(out))
            if g is None:
                continue
            grads = vjp(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = adj.get(key)
                adj[key] = gp if prev is None else prev + gp
                touched[key] = p
        for key, t in touched.items():
            g = adj[key]
            if g.shape != t.value.shape:
                g = np.broadcast_to(g, t.value.shape).copy()
            t._grad = g if t._grad is None else t._grad + g


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out._grad = None
    out.requires_grad = False
    out.node_id = None
    tape = _active()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape._record(out, parents, vjp)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    if a.value.shape == b.value.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _result(av * bv, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    a = _lift(a)
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a constant; subgradient 0 at ties."""
    a = _lift(a)
    mask = a.value > c
    return _result(np.where(mask, a.value, c), (a,), lambda g: (g * mask,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 1:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2 if bv.ndim >= 2 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bv.ndim == 1:

        def vjp_vec(g):
            return (
                _unbroadcast(g[..., :, None] * bv, av.shape) if a.requires_grad else None,
                np.einsum("...ij,...i->j", av, g) if b.requires_grad else None,
            )

        return _result(av @ bv, (a, b), vjp_vec)

    def vjp(g):
        return (
            _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None,
            _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None,
        )

    return _result(av @ bv, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """Fused affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = _lift(x), _lift(weight)
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = xv @ wv.T
    if bias is None:
        return _result(
            out,
            (x, weight),
            lambda g: (g @ wv if x.requires_grad else None, g.T @ xv if weight.requires_grad else None),
        )
    bias = _lift(bias)
    if bias.shape != (wv.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    out += bias.value

    def vjp(g):
        return (
            g @ wv if x.requires_grad else None,
            g.T @ xv if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _result(out, (x, weight, bias), vjp)


def solve(a, b) -> Tensor:
    """Batched linear solve ``a^{-1} b`` with ``a`` (..., p, p) and ``b`` (..., p)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or b.shape[-1] != a.shape[-1]:
        raise ShapeError(f"solve: incompatible shapes {a.shape} and {b.shape}")
    out = np.linalg.solve(a.value, b.value[..., None])[..., 0]

    def vjp(g):
        gb = np.linalg.solve(np.swapaxes(a.value, -1, -2), g[..., None])[..., 0]
        ga = -gb[..., :, None] * out[..., None, :]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), vjp)


def logdet(a) -> Tensor:
    """Batched log |det a| for square matrices in the last two axes."""
    a = _lift(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"logdet: expected square matrices, got {a.shape}")
    _, ld = np.linalg.slogdet(a.value)
    return _result(
        ld, (a,), lambda g: (g[..., None, None] * np.swapaxes(np.linalg.inv(a.value), -1, -2),)
    )


# -- elementwise unary -------------------------------------------------------


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.value > 0.0
    return _result(a.value * mask, (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    a = _lift(a)
    av = a.value
    return _result(av * av, (a,), lambda g: (2.0 * g * av,))


def absolute(a) -> Tensor:
    a = _lift(a)
    sgn = np.sign(a.value)
    return _result(np.abs(a.value), (a,), lambda g: (g * sgn,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    av = a.value
    return _result(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.value)
    return _result(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-150),))


def softplus(a) -> Tensor:
    a = _lift(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _result(out, (a,), lambda g: (g / (1.0 + np.exp(-av)),))


# -- reductions and structure ------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_lift(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = _lift(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.value[key], (a,), vjp)


def take_along(a, idx: np.ndarray, axis: int = -1) -> Tensor:
    a = _lift(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        ix = list(np.indices(idx.shape, sparse=True))
        ix[axis] = idx
        np.add.at(full, tuple(ix), g)
        return (full,)

    return _result(np.take_along_axis(a.value, idx, axis=axis), (a,), vjp)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(a.value, axis=axis), (a,), vjp)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``; mask is a constant."""
    a, b = _lift(a), _lift(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _result(
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * ~mask, sb)),
    )


def backward(output: Tensor) -> None:
    """Run the backward sweep on the active tape."""
    tape = _active()
    if tape is None:
        raise RuntimeError("backward: no active tape")
    tape.backward(output)


def gradient_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Largest relative discrepancy between autodiff and central differences.

    ``function`` maps a tensor shaped like ``point`` to a scalar tensor.
    """
    point = np.array(point, dtype=DTYPE)
    x = Tensor(point.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(x)
        tape.backward(out)
    ad = x.grad.reshape(-1)
    fd = np.empty_like(ad)
    flat = point.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = function(Tensor(hi.reshape(point.shape))).value
        f_lo = function(Tensor(lo.reshape(point.shape))).value
        fd[i] = (float(f_hi) - float(f_lo)) / (2.0 * step)
    if ad.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-8)))
