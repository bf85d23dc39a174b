"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value with numpy and records a closure
mapping the output adjoint to the input adjoints. ``backward`` orders the
recorded nodes into a :class:`GradTape` and replays the closures in reverse.
"""
from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from . import _kernels
from .errors import ContractError, NumericError, ShapeError

LOG_EPS = 1e-10

_grad_enabled = contextvars.ContextVar("graphmoe_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording any operations (per thread/context)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # arithmetic
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    """Wrap a forward value; record ``backward_fn`` if any parent needs a gradient.

    ``backward_fn`` maps the output adjoint to one adjoint (or None) per parent.
    """
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Tensor(data)


custom_op = _node


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- tape -------------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the nodes that lead to ``root``.

    ``nodes`` lists inputs before the outputs that consume them, so replaying
    adjoints over ``reversed(nodes)`` visits every node after all its consumers.
    """

    def __init__(self, root):
        self.root = root
        self.nodes = self._order(root)

    @staticmethod
    def _order(root):
        order = []
        seen = set()
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

    def replay(self, seed):
        adjoints = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = adjoints.get(key)
                adjoints[key] = pg if prev is None else prev + pg


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    GradTape(loss).replay(np.ones_like(loss.data))


# --- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    # d/dx log(1 + e^x) = sigmoid(x)
    sig = np.exp(x - out)
    return _node(out, (a,), lambda g: (g * sig,))


def clamp_min(a, lo):
    a = as_tensor(a)
    mask = a.data > lo
    return _node(np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


# --- shape ------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, key):
    """Basic (slice) indexing; advanced index arrays go through take_rows/take_along."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _node(a.data[key], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# --- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / count)


# --- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batching rules on leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim <= 2 and a.ndim >= 2:
        return _matmul_folded(a, b)
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    full = A @ B
    out = full
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]

    def bw(g):
        G = g.reshape(full.shape)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(b.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def rowwise_matmul(a, b):
    """``a @ b`` for 2-D ``b`` (or 1-D), each output row computed the same way wherever it sits.

    BLAS may round a row differently depending on its position in the tile
    layout; einsum does not, so permuting rows of ``a`` permutes the result
    bit for bit.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"rowwise_matmul shapes do not contract: {a.shape} @ {b.shape}")
    spec = "...k,k->..." if b.ndim == 1 else "...k,km->...m"
    out = np.einsum(spec, a.data, b.data)

    def bw(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * b.data
            if b.requires_grad:
                gb = np.tensordot(g, a.data, axes=g.ndim)
        else:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(out, (a, b), bw)


def ordered_matmul(x, c):
    """``x @ c`` for a constant 2-D ``c``, each output summed in sorted-term order.

    The value of every output entry depends only on the multiset of its
    products, so relabeling the contracted axis (of ``x`` and ``c`` together)
    leaves it bit-identical. Gradients flow to ``x`` only.
    """
    x, c = as_tensor(x), as_tensor(c)
    if c.ndim != 2 or x.ndim < 1 or x.shape[-1] != c.shape[0]:
        raise ShapeError(f"ordered_matmul shapes do not contract: {x.shape} @ {c.shape}")
    terms = x.data[..., :, None] * c.data
    out = np.sort(terms, axis=-2).sum(axis=-2)

    def bw(g):
        return (g @ c.data.T,)

    return _node(out, (x,), bw)


def _matmul_folded(a, b):
    # leading dims of a fold into rows: one 2-D product instead of a batched one
    k = a.shape[-1]
    A = a.data.reshape(-1, k)
    B = b.data[:, None] if b.ndim == 1 else b.data
    full = A @ B
    out_shape = a.shape[:-1] + b.shape[1:]

    def bw(g):
        G = g.reshape(full.shape)
        ga = (G @ B.T).reshape(a.shape) if a.requires_grad else None
        gb = (A.T @ G).reshape(b.shape) if b.requires_grad else None
        return ga, gb

    return _node(full.reshape(out_shape), (a, b), bw)


def linear(x, w):
    """``x @ w.T`` over the last axis of ``x``; ``w`` is (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    X = x.data.reshape(-1, w.shape[1])
    out = X @ w.data.T

    def bw(g):
        G = g.reshape(out.shape)
        gx = (G @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = G.T @ X if w.requires_grad else None
        return gx, gw

    return _node(out.reshape(x.shape[:-1] + (w.shape[0],)), (x, w), bw)


# --- gather / scatter -------------------------------------------------------


def take_rows(a, idx):
    """``a[idx]`` along the first axis."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros((a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64))))
        _kernels.scatter_add_rows(full, idx, g.reshape(len(idx), -1))
        return (full.reshape(a.shape),)

    return _node(a.data[idx], (a,), bw)


def scatter_rows(src, idx, n_rows):
    """Zeros of ``n_rows`` rows with ``src[i]`` added into row ``idx[i]``."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    tail = src.shape[1:]
    out = np.zeros((n_rows, int(np.prod(tail, dtype=np.int64))))
    _kernels.scatter_add_rows(out, idx, src.data.reshape(len(idx), -1))
    return _node(out.reshape((n_rows,) + tail), (src,), lambda g: (g[idx],))


def take_flat(a, flat_idx):
    """``a.ravel()[flat_idx]``."""
    a = as_tensor(a)
    flat_idx = np.asarray(flat_idx, dtype=np.int64)

    def bw(g):
        full = np.bincount(flat_idx, weights=g.ravel(), minlength=a.size)
        return (full.reshape(a.shape),)

    return _node(a.data.ravel()[flat_idx], (a,), bw)


def take_along(a, idx, axis=-1):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _node(np.take_along_axis(a.data, idx, axis=axis), (a,), bw)


def put_along(src, idx, width, axis=-1):
    """Inverse of take_along: place ``src`` at ``idx`` in a zero array of ``width``.

    Indices must be distinct along ``axis``.
    """
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    shape = list(src.shape)
    shape[axis] = width
    out = np.zeros(shape)
    np.put_along_axis(out, idx, src.data, axis=axis)
    return _node(out, (src,), lambda g: (np.take_along_axis(g, idx, axis=axis),))


# --- probability ------------------------------------------------------------


def softmax(a, axis=-1):
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    # sorted before summing so the normalizer ignores the order of the entries
    out = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise logits."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _node(np.asarray(loss), (logits,), bw)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _node(out, (a,), bw)


def sort_descending_with_grad(v):
    """Sort along the last axis, largest first, ties by original index.

    Returns ``(sorted, perm)`` with ``sorted[..., j] == v[..., perm[..., j]]``.
    The adjoint scatters back through the inverse permutation.
    """
    v = as_tensor(v)
    flat = v.data.reshape(-1, v.shape[-1])
    perm = _kernels.argsort_desc_rows(flat).reshape(v.shape)
    out = np.take_along_axis(v.data, perm, axis=-1)

    def bw(g):
        full = np.empty_like(g)
        np.put_along_axis(full, perm, g, axis=-1)
        return (full,)

    return _node(out, (v,), bw), perm


def check_probability(p, what="p", tol=1e-9):
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    if (data < 0).any() or not np.all(np.abs(data.sum(axis=-1) - 1.0) <= tol):
        raise ContractError(f"{what} must be a probability vector along its last axis")


def kl_divergence(p, q, eps=LOG_EPS):
    """``sum(p * ln(p / q))`` along the last axis, logs clamped below at ``eps``.

    Returns a scalar for 1-D inputs and one value per row otherwise.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    check_probability(p, "kl_divergence target p")
    log_ratio = sub(log(clamp_min(p, eps)), log(clamp_min(q, eps)))
    return sum_(mul(p, log_ratio), axis=-1)
