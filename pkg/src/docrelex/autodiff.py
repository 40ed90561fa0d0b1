"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity is a :class:`Tensor` wrapping an ndarray.
Operations record a tape edge per input; ``Tensor.backward()`` walks the tape
in reverse topological order and accumulates gradients on leaf tensors.

Everything runs in double precision so analytic gradients can be compared
against central finite differences at tight tolerances.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "matmul",
    "matvec",
    "concat",
    "stack",
    "gather_rows",
    "logsumexp",
    "masked_logsumexp",
    "logaddexp",
    "softmax",
    "numeric_gradient",
]


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray plus the tape edges needed for reverse-mode differentiation.

    ``data`` is always float64. A tensor requires grad either because it was
    created that way (a leaf, e.g. a parameter) or because one of its inputs
    does. Gradients accumulate on leaves only.
    """

    __slots__ = ("data", "grad", "requires_grad", "_edges")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # sequence of (parent, fn) where fn maps the output gradient to the
        # parent's gradient contribution
        self._edges: tuple = ()

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): _as_f64(grad)}

        # iterative DFS topological order over the requires-grad subgraph
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._edges:
                if id(parent) not in visited:
                    stack.append((parent, False))

        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._edges:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node._edges:
                contribution = fn(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contribution if prev is None else prev + contribution

    # ------------------------------------------------------------------
    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # shape ops
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    # elementwise
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, edges: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    live = tuple((p, fn) for p, fn in edges if p.requires_grad)
    out = Tensor(data, requires_grad=bool(live))
    out._edges = live
    return out


# ----------------------------------------------------------------------
# primitive ops
def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _from_op(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _from_op(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _from_op(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _from_op(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def neg(a) -> Tensor:
    a = _coerce(a)
    return _from_op(-a.data, [(a, lambda g: -g)])


def power(a, exponent: float) -> Tensor:
    a = _coerce(a)
    e = float(exponent)
    return _from_op(
        a.data**e,
        [(a, lambda g: g * e * a.data ** (e - 1.0))],
    )


def matmul(a, b) -> Tensor:
    """Matrix product; both operands must have ndim >= 2 (batching allowed)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 on both sides; use matvec")
    return _from_op(
        np.matmul(a.data, b.data),
        [
            (a, lambda g: _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)),
            (b, lambda g: _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)),
        ],
    )


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """(n, k) @ (k,) -> (n,), composed from matmul and reshape."""
    return matmul(m, reshape(_coerce(v), (-1, 1))).reshape((-1,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)
    return _from_op(out_data, [(a, lambda g: g * out_data)])


def log(a) -> Tensor:
    a = _coerce(a)
    return _from_op(np.log(a.data), [(a, lambda g: g / a.data)])


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)
    return _from_op(out_data, [(a, lambda g: g * (1.0 - out_data * out_data))])


def relu(a) -> Tensor:
    a = _coerce(a)
    return _from_op(np.maximum(a.data, 0.0), [(a, lambda g: g * (a.data > 0.0))])


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)
    return _from_op(out_data, [(a, lambda g: g * 0.5 / out_data)])


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay well behaved."""
    a = _coerce(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _from_op(x * cdf, [(a, lambda g: g * (cdf + x * pdf))])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)

    def backward(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full(a.data.shape, g)
        g_expanded = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_expanded, a.data.shape).copy()

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), [(a, backward)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    return _from_op(a.data.reshape(shape), [(a, lambda g: g.reshape(a.data.shape))])


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _coerce(a)
    return _from_op(a.data.swapaxes(i, j), [(a, lambda g: g.swapaxes(i, j))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def make_backward(index: int):
        def backward(g: np.ndarray) -> np.ndarray:
            return np.split(g, offsets, axis=axis)[index]

        return backward

    return _from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        [(t, make_backward(i)) for i, t in enumerate(tensors)],
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]

    def make_backward(index: int):
        def backward(g: np.ndarray) -> np.ndarray:
            return np.take(g, index, axis=axis)

        return backward

    return _from_op(
        np.stack([t.data for t in tensors], axis=axis),
        [(t, make_backward(i)) for i, t in enumerate(tensors)],
    )


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds (repeats accumulate)."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _from_op(a.data[idx], [(a, backward)])


# ----------------------------------------------------------------------
# stabilized compositions
def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log-sum-exp with max subtraction. The subtracted max is treated as a
    constant, which leaves gradients exact because LSE(x) = c + LSE(x - c)."""
    a = _coerce(a)
    c = np.max(a.data, axis=axis, keepdims=True)
    shifted = exp(a - constant(c))
    out = log(tsum(shifted, axis=axis, keepdims=True)) + constant(c)
    if not keepdims:
        out = reshape(out, np.sum(shifted.data, axis=axis, keepdims=False).shape)
    return out


def masked_logsumexp(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """LSE restricted to positions where ``mask`` is 1.

    Excluded positions contribute exactly zero to both the value and the
    gradient: shifted scores are zeroed by the mask before exponentiation, so
    no overflow can occur even when excluded scores dominate.
    Every row must select at least one position.
    """
    a = _coerce(a)
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all(mask.sum(axis=axis) > 0):
        raise ValueError("masked_logsumexp needs a non-empty mask per row")
    neg_inf = np.where(mask > 0, a.data, -np.inf)
    c = np.max(neg_inf, axis=axis, keepdims=True)
    mask_t = constant(mask)
    shifted = (a - constant(c)) * mask_t
    terms = exp(shifted) * mask_t
    out = log(tsum(terms, axis=axis, keepdims=True)) + constant(c)
    return reshape(out, np.sum(mask, axis=axis).shape)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)), broadcast, max-stabilized."""
    a, b = _coerce(a), _coerce(b)
    c = np.maximum(a.data, b.data)
    c_t = constant(c)
    return log(exp(a - c_t) + exp(b - c_t)) + c_t


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _coerce(a)
    c = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - constant(c))
    return e / tsum(e, axis=axis, keepdims=True)


# ----------------------------------------------------------------------
def numeric_gradient(f: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5,
                     coords: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite-difference gradient of ``f()`` w.r.t. ``tensor``.

    ``f`` must rebuild its graph from ``tensor.data`` on every call. When
    ``coords`` is given only those positions are probed (the rest are zero).
    """
    base = tensor.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    if coords is None:
        indices = range(flat.size)
    else:
        indices = [int(np.ravel_multi_index(c, base.shape)) for c in coords]
    grad_flat = grad.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2.0 * step)
    return grad
