"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. Graph
construction is skipped entirely when no input requires a gradient, so
evaluation code pays nothing for the machinery.

Broadcasting is deliberately limited to "same shape" and "Python scalar";
row-vector expansion (bias addition) goes through the explicit
:func:`tile_rows` op.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    # extended precision passes through; it is only used by the grad_check oracle
    if arr.dtype == np.longdouble and np.longdouble != np.float64:
        return arr
    return np.asarray(arr, dtype=np.float64)


class Tensor:
    """Dense float64 array that can take part in a computation graph."""

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", grad_fn=None):
        self.data = _as_float(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and op == "leaf" else None
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.op = op
        self._grad_fn: GradFn | None = grad_fn

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(other, self)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def tensor_new(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a shape and a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, grad_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, op=op, grad_fn=grad_fn)
    return Tensor(data, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), "add_scalar", lambda g: (g,))
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scalar_mul(c: float, a: Tensor) -> Tensor:
    c = float(c)
    return _make(c * a.data, (a,), "scalar_mul", lambda g: (c * g,))


def neg(a: Tensor) -> Tensor:
    return scalar_mul(-1.0, a)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; mirrors the individual functions above."""
    unary = {"relu": relu, "exp": exp, "log": log}
    if op in unary:
        return unary[op](a)
    if op == "scalar_mul":
        # accept either argument order
        if isinstance(a, Tensor):
            return scalar_mul(b, a)
        return scalar_mul(a, b)
    binary = {"add": add, "sub": sub, "mul": mul}
    if op not in binary:
        raise ContractError(f"unknown elementwise op {op!r}")
    return binary[op](a, b)


# -- shape and reduction ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(old),))


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Stack a 1-D tensor ``n`` times into an ``[n, d]`` matrix."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows needs a vector, got {v.shape}")
    return _make(np.tile(v.data, (n, 1)), (v,), "tile_rows", lambda g: (g.sum(axis=0),))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.array(a.data.sum()), (a,), "sum", lambda g: (np.full(shape, float(g)),))
    out = a.data.sum(axis=axis)
    return _make(out, (a,), "sum", lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean; anchored on the first entry so equal entries average exactly."""
    shape = a.shape
    if axis is None:
        ref = a.data.reshape(-1)[0] if a.data.size else 0.0
        out = np.array(ref + np.mean(a.data - ref))
        return _make(out, (a,), "mean", lambda g: (np.full(shape, float(g) / a.data.size),))
    ref = np.take(a.data, [0], axis=axis)
    out = np.squeeze(ref, axis) + np.mean(a.data - ref, axis=axis)
    n = shape[axis]
    return _make(out, (a,), "mean",
                 lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a ``[b, c]`` tensor, shifted by the row max."""
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"log_softmax needs [b, c>=2], got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), "log_softmax", grad_fn)


# -- composites -------------------------------------------------------

def softmax_entropy(logits: Tensor) -> Tensor:
    """Per-row entropy (nats) of softmax(logits); shape ``[b]``.

    Computed as ``logsumexp(s) - sum(p * s)`` on max-shifted logits ``s`` so that
    equal logits give exactly ``ln C``.
    """
    x = logits
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_entropy needs [b, c>=2], got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_entropy received non-finite input")
    s = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(s)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    out = np.log(z[:, 0]) - (p * s).sum(axis=1)

    def grad_fn(g):
        # dH/dx_j = -p_j (log p_j + H)
        logp = s - np.log(z)
        return (-(g[:, None]) * p * (logp + out[:, None]),)

    return _make(out, (x,), "softmax_entropy", grad_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    return neg(mean(tsum(mul(log_softmax(logits), Tensor(onehot)), axis=1)))


# -- backward ---------------------------------------------------------

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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
                 extended: bool = True) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``extended`` the perturbed evaluations run in ``np.longdouble`` so the
    difference quotient is not swamped by float64 roundoff of ``f``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    dtype = np.longdouble if extended else np.float64
    base = x.data.astype(dtype)
    h = dtype(step)
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).data.reshape(-1)[0]
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).data.reshape(-1)[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric.reshape(-1)[i] = float((fp - fm) / (2 * h))
    return numeric


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
               extended: bool = True) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    Per coordinate: |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    leaf = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError("f must return a scalar tensor")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("f is not finite at x")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = numeric_grad(f, x, step, extended)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


class Parameter(Tensor):
    """Trainable leaf tensor with a name and an optimizer momentum buffer."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.velocity = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"
