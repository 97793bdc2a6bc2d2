"""Dense float64 tensors with a small reverse-mode tape.

Only the operations used by the two-branch networks and their losses are
provided. Each op records its parents and a closure that maps the output
gradient to parent gradients; :func:`backward` walks the graph once in
reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
L2_EPS = 1e-12
_DIST_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable array node on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are limited to 2 dimensions, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elementwise_product(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor.

    The forward pass uses a non-BLAS contraction so that each output row is
    computed identically no matter how many rows are in the batch.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.einsum("ik,kn->in", a.data, b.data, optimize=False)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), backward_fn, "matmul")


def add(a: Tensor, b) -> Tensor:
    """Sum with row-vector / scalar broadcasting (used for biases and margins)."""
    b = as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add dimension mismatch: {a.shape} + {b.shape}") from None
    if out.shape != a.shape and out.shape != b.shape:
        raise ShapeError(f"add dimension mismatch: {a.shape} + {b.shape}")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _node(a.data * c, (a,), backward_fn, "scale")


def elementwise_product(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two tensors with identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_product dimension mismatch: {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), backward_fn, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), backward_fn, "relu")


class BatchNormStats:
    """Running mean/variance for one batch-norm layer (not learnable)."""

    def __init__(self, dim: int, mean=None, var=None):
        self.mean = np.zeros(dim) if mean is None else np.array(mean, dtype=np.float64)
        self.var = np.ones(dim) if var is None else np.array(var, dtype=np.float64)


def batch_norm(
    a: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Column-wise batch normalisation.

    In training mode the batch statistics are used and ``stats`` is updated
    in place by an exponential moving average (``momentum`` weights the old
    value). In inference mode ``stats`` is used and left untouched.
    """
    x = a.data
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm shapes: input {a.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    if training:
        if n < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2 rows")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        stats.mean = momentum * stats.mean + (1.0 - momentum) * mu
        stats.var = momentum * stats.var + (1.0 - momentum) * var * n / (n - 1)
    else:
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _node(out, (a, gamma, beta), backward_fn, "batch_norm")


def l2_normalize(a: Tensor, eps: float = L2_EPS) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects a matrix, got {a.shape}")
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x / denom

    def backward_fn(g):
        proj = np.where(big, (g * y).sum(axis=1, keepdims=True), 0.0)
        return ((g - y * proj) / denom,)

    return _node(y, (a,), backward_fn, "l2_normalize")


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows ``a[index]``; gradients are scatter-added back."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def backward_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward_fn, "gather")


def row_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows of two matrices."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"row_distance dimension mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=1))

    def backward_fn(g):
        coef = np.where(d > _DIST_EPS, g / np.maximum(d, _DIST_EPS), 0.0)[:, None]
        da = coef * diff
        return da, -da

    return _node(d, (a, b), backward_fn, "row_distance")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), backward_fn, "reshape")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""

    def backward_fn(g):
        return (np.full(a.shape, float(g)),)

    return _node(a.data.sum(), (a,), backward_fn, "sum")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` in the overflow-free form ``max(a, 0) + log1p(exp(-|a|))``."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward_fn(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _node(out, (a,), backward_fn, "softplus")


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def backward_fn(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), backward_fn, "dropout")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``root``.

    Returns a map from leaf tensor to gradient. When ``leaves`` is given,
    every listed leaf gets an entry, zero if it is not on a path to ``root``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    found: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                found[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)
    if leaves is None:
        return found
    return {leaf: found.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves}
