"""
Minimal dense-tensor engine with reverse-mode differentiation.

Every differentiable operation returns a new `Tensor` holding a closure that maps
the gradient of the output to the gradients of its inputs. `Tensor.backward`
walks the graph in reverse topological order. Inputs that do not require
gradients are never recorded, so frozen parameters cost nothing on the
backward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A value became NaN/Inf or a norm was zero."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


_state = {"dtype": np.float32, "grad_enabled": True}


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Select the working precision: ``"f32"`` (default) or ``"f64"``."""
    if name not in ("f32", "f64"):
        raise ValueError(f"unknown precision {name!r}; expected f32 or f64")
    _state["dtype"] = np.float32 if name == "f32" else np.float64


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _state["grad_enabled"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_size(self.shape, axis)
        return mul(tsum(self, axis, keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    # -- backward ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg

    def zero_grad(self) -> None:
        self.grad = None


def _raise_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _axis_size(shape, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for a in axes:
        n *= shape[a]
    return n


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor._op(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = b
        sa = a.shape

        def backward_const(g):
            return (unbroadcast(g * c, sa),)

        return Tensor._op(a.data * c, (a,), backward_const)
    a = _lift(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = unbroadcast(g * b.data, sa) if a.requires_grad else None
        gb = unbroadcast(g * a.data, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._op(a.data * b.data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._op(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    x = a.data
    return Tensor._op(np.log(x), (a,), lambda g: (g / x,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return Tensor._op(out, (a,), backward)


# -- reductions and shape ops ----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return Tensor._op(a.data[index], (a,), backward)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D ``table`` by an integer index array of any shape."""
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    n, d = table.shape

    def backward(g):
        flat = g.reshape(-1, d)
        out = np.zeros((n, d), dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), flat)
        return (out,)

    return Tensor._op(table.data[idx], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast, a 2-D right operand is shared."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = sb
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    return Tensor._op(a.data @ b.data, (a, b), backward)


# -- normalised exponentials ---------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max-subtraction. ``mask`` (bool, broadcastable) marks admissible entries."""
    data = x.data
    if data.ndim == 0 or data.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(mask, data.shape)
        shifted = np.where(mask, data, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise NumericError("softmax row with no admissible entries")
        e = np.where(mask, np.exp(shifted - m), 0.0)
    else:
        e = np.exp(data - data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._op(y.astype(data.dtype, copy=False), (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(x))) over ``axis`` restricted to ``mask``; the axis is reduced."""
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, data.shape)
        shifted = np.where(mask, data, -np.inf)
    else:
        shifted = data
    m = shifted.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("logsumexp over no admissible entries")
    e = np.exp(shifted - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    p = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * p,)

    return Tensor._op(out.astype(data.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    xc = data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = data.shape[-1]
    d = gamma.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return Tensor._op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ||x|| along ``axis``; a zero-norm slice is a numeric error."""
    data = x.data
    norm = np.sqrt((data * data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise NumericError("zero-norm or non-finite vector cannot be normalised")
    y = data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._op(y, (x,), backward)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors (or row-wise for matching 2-D inputs)."""
    u, v = _lift(u), _lift(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim operands differ in shape: {u.shape} vs {v.shape}")
    return (l2_normalize(u) * l2_normalize(v)).sum(axis=-1)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{what} contains NaN or Inf")
    return t


# -- gradient checking -------------------------------------------------------

def finite_diff_errors(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each coordinate perturbed in place. When ``max_coords``
    is set, a seeded sample of that many coordinates per parameter is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective at perturbed coordinate {c} of {p.name}")
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[c])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, err)
        errors[p.name or f"param{i}"] = worst
    return errors


def finite_diff_check(f, params, eps: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative gradient error over all checked coordinates of ``params``."""
    errs = finite_diff_errors(f, params, eps=eps, max_coords=max_coords, seed=seed)
    return max(errs.values(), default=0.0)
