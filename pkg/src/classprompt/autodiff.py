"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps an immutable numpy array and, when an operation involves
at least one tensor with requires_grad, records its parents plus a
closure implementing the local backward rule. backward() on a scalar
root walks the recorded graph once in reverse topological order and
accumulates gradients additively into every reachable requires_grad
tensor.

Design rules followed throughout:

* float64 only; values are frozen (read-only) after creation;
* slices and reshapes copy, there are no aliased views;
* matmul accumulates strictly in ascending order of the contracted
  index, which makes it bit-identical to the classic triple loop
  ``for i: for j: for p: out[i,j] += a[i,p]*b[p,j]`` for every shape;
* broadcasting is supported for elementwise ops and matmul batch dims,
  with gradients summed back to the original shapes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DeterminismError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Tensor:
    """Dense float64 array node in a reverse-mode gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _freeze(np.ascontiguousarray(data, dtype=np.float64))
        out.grad = None
        needs = any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Populate grad on every requires_grad tensor this scalar depends on."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar root, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward root does not depend on any trainable tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _toposort(root: Tensor):
    """Iterative post-order over parents; each node appears exactly once."""
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    # assignment without copy is safe: contribution arrays are never
    # mutated in place, later contributions allocate via `+`
    if tensor.grad is None:
        tensor.grad = grad
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return Tensor._from_op(-a.data, (a,), backward)


def power(a: Tensor, p) -> Tensor:
    """Elementwise a**p for a scalar exponent p.

    Non-integer exponents require strictly positive inputs (callers
    guarantee this; it is not re-checked here).
    """
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        _accumulate(a, g * (p * a.data ** (p - 1.0)))

    return Tensor._from_op(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return Tensor._from_op(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / out_data))

    return Tensor._from_op(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return Tensor._from_op(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accumulate(a, g * local)

    return Tensor._from_op(out_data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, computed with max subtraction."""
    if a.data.shape[-1] < 1:
        raise ShapeError("softmax needs at least one column")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), backward)


# -- reductions ----------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return Tensor._from_op(np.asarray(out_data), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape).copy()

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return Tensor._from_op(out_data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                _accumulate(t, np.ascontiguousarray(g[tuple(index)]))

    return Tensor._from_op(out_data, tensors, backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Copying slice [start:stop) along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    out_data = a.data[tuple(index)].copy()

    def backward(g):
        full = np.zeros(a.shape)
        full[tuple(index)] = g
        _accumulate(a, full)

    return Tensor._from_op(out_data, (a,), backward)


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor n times along a new leading axis."""
    out_data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def backward(g):
        _accumulate(a, g.sum(axis=0))

    return Tensor._from_op(out_data, (a,), backward)


# -- matrix multiplication -------------------------------------------------------


_EXACT_K_LIMIT = 16


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul.

    For contracted dimension k <= 16 the sum is accumulated strictly in
    ascending k order, making the result bit-identical to the classic
    triple loop (the contract tested up to 16x16x16). Larger k uses the
    BLAS path, which is deterministic on a given platform but free to
    reorder the reduction.
    """
    k = a.shape[-1]
    if k > _EXACT_K_LIMIT:
        return np.matmul(a, b)
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, n = a.shape[-2], b.shape[-1]
    out = np.zeros(batch + (m, n))
    for p in range(k):
        out += a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires at least 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as err:
        raise ShapeError(
            f"matmul batch dimensions disagree: {a.shape} x {b.shape}"
        ) from err
    out_data = _mm(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(_mm(g, _swap_last(b.data)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(_mm(_swap_last(a.data), g), b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


# -- composite layers ------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if eps <= 0.0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs at least one feature")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}"
        )
    mu = tensor_sum(x, axis=-1, keepdims=True) * (1.0 / d)
    centered = x - mu
    var = tensor_sum(centered * centered, axis=-1, keepdims=True) * (1.0 / d)
    inv = power(var + eps, -0.5)
    return centered * inv * gain + bias


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit L2 norm. Rows must be nonzero."""
    sq = tensor_sum(x * x, axis=-1, keepdims=True)
    return x * power(sq, -0.5)


# -- gradient verification ---------------------------------------------------------


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f, params, h: float = 1e-5) -> float:
    """Compare analytic gradients of f against central finite differences.

    f takes the params list and returns a scalar Tensor; it must be
    deterministic (verified by evaluating twice). Returns the maximum of
    |g_analytic - g_numeric| / max(1, |g_analytic|, |g_numeric|) across
    every coordinate of every param.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractError(f"step size h={h} outside [1e-7, 1e-3]")
    first = f(params)
    second = f(params)
    if not np.array_equal(first.data, second.data):
        raise DeterminismError("f returned different values on repeated evaluation")

    zero_grads(params)
    out = f(params)
    out.backward()
    analytic = []
    for p in params:
        analytic.append(np.zeros(p.shape) if p.grad is None else p.grad.copy())

    worst = 0.0
    for p, ga in zip(params, analytic):
        original = p.data
        flat_ga = ga.ravel()
        for idx in range(original.size):
            coords = np.unravel_index(idx, original.shape)
            bumped = original.copy()
            bumped[coords] = original[coords] + h
            p.data = _freeze(bumped)
            f_plus = f(params).item()
            bumped = original.copy()
            bumped[coords] = original[coords] - h
            p.data = _freeze(bumped)
            f_minus = f(params).item()
            p.data = original
            gn = (f_plus - f_minus) / (2.0 * h)
            ga_i = flat_ga[idx]
            rel = abs(ga_i - gn) / max(1.0, abs(ga_i), abs(gn))
            worst = max(worst, rel)
    return worst
