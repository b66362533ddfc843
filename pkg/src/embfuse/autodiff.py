"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Tensors are rank <= 2. Each op records its inputs and a closure that maps the
output gradient to input gradients; :func:`backward` walks the recorded graph
once in reverse topological order. The graph is rebuilt on every forward
pass (define-by-run).

Only leaves created with ``requires_grad=True`` receive a ``.grad``. Anything
else (data, frozen embedding rows, masks) is a constant and never gets one.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ContractError, DegenerateVectorError, ShapeError

NORM_EPS = 1e-12

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _freeze(arr):
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are limited to rank 2, got shape {arr.shape}")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > 2:
            raise ShapeError(f"op {op} produced rank {data.ndim} result")
        out.data = _freeze(data)
        out.grad = None
        out.op = op
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return self.data.shape[0]

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), bw, "div")


def tanh(a):
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a):
    y = np.exp(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    x = a.data
    return Tensor._from_op(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient passes wherever the bound is not violated."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._from_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return Tensor._from_op(A @ B, (a, b), bw, "matmul")


def transpose(a):
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def tsum(a, axis=None, keepdims=False):
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), bw, "concat")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None for i in items)


def getitem(a, idx):
    """Indexing, slicing and integer-array gathers (e.g. embedding row lookup)."""
    src = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(src)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(a.data[idx], (a,), bw, "getitem")


def slice_rows(a, start, stop):
    return getitem(a, slice(start, stop))


def take_rows(a, ids):
    return getitem(a, np.asarray(ids, dtype=np.intp))


# --------------------------------------------------------------------------
# normalised maps


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")


def softmax(logits, tau=1.0, axis=-1):
    """Temperature softmax along ``axis`` with max subtraction."""
    _check_tau(tau)
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)) / tau,)

    return Tensor._from_op(p, (logits,), bw, "softmax")


def log_softmax(logits, tau=1.0, axis=-1):
    _check_tau(tau)
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / tau,)

    return Tensor._from_op(y, (logits,), bw, "log_softmax")


def l2_normalize(a, axis=-1, eps=NORM_EPS):
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError(f"cannot normalise a vector with L2 norm <= {eps}")
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(y, (a,), bw, "l2_normalize")


def cosine_similarity(a, b, eps=NORM_EPS):
    """Cosine of the angle between ``a`` and ``b`` along the last axis.

    Works row-wise on matrices. Either argument may be a constant; a zero
    or near-zero vector raises :class:`DegenerateVectorError`.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return tsum(l2_normalize(a, eps=eps) * l2_normalize(b, eps=eps), axis=-1)


# --------------------------------------------------------------------------
# batched attention helpers; keys/values are (batch*steps) x dim, batch-major


def block_dot(keys, query):
    """``out[b, t] = keys[b*T + t] . query[b]`` for a B x A query."""
    B, A = query.shape
    if keys.ndim != 2 or keys.shape[1] != A or keys.shape[0] % B:
        raise ShapeError(f"block_dot: keys {keys.shape} do not tile query {query.shape}")
    T = keys.shape[0] // B
    K = keys.data.reshape(B, T, A)
    q = query.data

    def bw(g):
        gk = (g[:, :, None] * q[:, None, :]).reshape(B * T, A)
        gq = np.einsum("bt,bta->ba", g, K)
        return gk, gq

    return Tensor._from_op(np.einsum("bta,ba->bt", K, q), (keys, query), bw, "block_dot")


def block_weighted_sum(weights, values):
    """``out[b] = sum_t weights[b, t] * values[b*T + t]``."""
    B, T = weights.shape
    if values.ndim != 2 or values.shape[0] != B * T:
        raise ShapeError(f"block_weighted_sum: values {values.shape} vs weights {weights.shape}")
    E = values.shape[1]
    V = values.data.reshape(B, T, E)
    w = weights.data

    def bw(g):
        gw = np.einsum("be,bte->bt", g, V)
        gv = (w[:, :, None] * g[:, None, :]).reshape(B * T, E)
        return gw, gv

    return Tensor._from_op(np.einsum("bt,bte->be", w, V), (weights, values), bw, "block_wsum")


# --------------------------------------------------------------------------
# backward pass


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the number of graph nodes visited.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return 0
    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return len(order)


# --------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn, point, eps=1e-5):
    """Max relative error between the analytic and central-difference gradient.

    ``fn`` maps a Tensor to a scalar Tensor.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    backward(fn(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    with no_grad():
        for i in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[i] += eps
            lo[i] -= eps
            numeric[i] = (fn(Tensor(hi)).item() - fn(Tensor(lo)).item()) / (2 * eps)
    return relative_error(analytic, numeric)


def grad_check_params(loss_fn, params, eps=1e-5):
    """Like :func:`grad_check` but over every entry of several parameters.

    ``loss_fn`` takes no arguments and reads the parameters' current data.
    Returns ``(max_rel_error, per_param)`` where ``per_param`` maps index to error.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    per_param = {}
    with no_grad():
        for k, p in enumerate(params):
            analytic = p.grad if p.grad is not None else np.zeros(p.shape)
            original = p.data
            numeric = np.zeros(p.shape)
            for i in np.ndindex(p.shape):
                moved = original.copy()
                moved[i] += eps
                p.data = moved
                up = loss_fn().item()
                moved = original.copy()
                moved[i] -= eps
                p.data = moved
                down = loss_fn().item()
                numeric[i] = (up - down) / (2 * eps)
            p.data = original
            per_param[k] = relative_error(analytic, numeric)
    worst = max(per_param.values()) if per_param else 0.0
    return worst, per_param
