"""Dense-tensor arithmetic with reverse-mode differentiation.

A small tape-based engine over numpy arrays. Tensors are float32 by default;
float64 is supported so gradients can be checked against central finite
differences at tight tolerance. Every op records its parents on the output
tensor, and ``backward`` runs a reverse topological sweep accumulating into
``.grad``.

Masked logits use -inf as a sentinel; ``softmax`` / ``log_softmax`` map them
to exact zeros / -inf and never propagate gradient into masked entries.
"""

from __future__ import annotations

import contextlib

import numpy as np

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional place in the computation graph.

    ``data`` is always a float32 or float64 ndarray. Leaf tensors created
    with ``requires_grad=True`` are parameters; non-leaf tensors remember
    their parents and a closure that routes the output gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """The underlying array, outside the graph. Treat as read-only."""
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars stay plain numpy scalars (no graph node needed)
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, other)
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, -other)
        return add(self, mul_const(other, -1.0))

    def __rsub__(self, other):
        return add_const(mul_const(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_const(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_const(self, 1.0 / other)
        raise TypeError("tensor/tensor division is not a traced primitive")

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, name="operand"):
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"{name} is not a traced Tensor (got {type(x).__name__}); wrap arrays in Tensor first")


def _node(data, parents, backward_fn):
    """Build an output tensor, recording the graph only when it matters."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` along axes that were broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss):
    """Reverse sweep from a scalar loss; accumulates into each leaf's .grad."""
    loss = _as_tensor(loss, "loss")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), bwd)


def add_const(a, c):
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g)

    return _node(a.data + c, (a,), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def mul_const(a, c):
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")

    def bwd(g):
        _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _node(np.matmul(a.data, b.data), (a, b), bwd)


def reshape(a, shape):
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), bwd)


def relu(a):
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0), (a,), bwd)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), bwd)


def log(a):
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def pow_const(a, exponent):
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _node(a.data ** exponent, (a,), bwd)


def maximum_const(a, c):
    """Elementwise max with a constant; subgradient 0 on the clamped side."""
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, g * (a.data > c))

    return _node(np.maximum(a.data, c), (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul_const(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def embedding(table, ids):
    """Row gather: table (V, H), integer ids of any shape -> (*ids.shape, H)."""
    table = _as_tensor(table, "embedding table")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accumulate(table, gt)

    return _node(table.data[ids], (table,), bwd)


def gather_last(a, idx):
    """Pick one entry per row along the last axis; idx shape = a.shape[:-1]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError(f"gather index shape {idx.shape} does not match {a.data.shape[:-1]}")
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            flat = ga.reshape(-1, ga.shape[-1])
            rows = np.arange(flat.shape[0])
            np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
            _accumulate(a, ga)

    return _node(out_data, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out_data = norm * gain.data + bias.data
    n = x.data.shape[-1]

    def bwd(g):
        _accumulate(bias, g)
        _accumulate(gain, g * norm)
        gn = g * gain.data
        gx = inv_std * (gn - gn.mean(axis=-1, keepdims=True)
                        - norm * (gn * norm).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)

    return _node(out_data, (x, gain, bias), bwd)


def dropout(x, p, rng):
    """Inverted dropout; identity when p == 0."""
    x = _as_tensor(x)
    if p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def bwd(g):
        _accumulate(x, g * keep)

    return _node(x.data * keep, (x,), bwd)


def softmax(logits, temperature=1.0, axis=-1):
    """Exp-normalize along ``axis`` with max-subtraction for stability.

    Entries equal to -inf are treated as masked and map to exactly 0. A row
    whose entries are all masked has no valid support and is an error.
    ``temperature`` divides the logits before normalizing.
    """
    logits = _as_tensor(logits, "logits")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    data = logits.data
    m = data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("empty support: a softmax row has all entries masked")
    z = np.exp((data - m) / temperature)
    out_data = z / z.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(logits, out_data * (g - inner) / temperature)

    return _node(out_data, (logits,), bwd)


def log_softmax(logits, axis=-1):
    logits = _as_tensor(logits, "logits")
    data = logits.data
    m = data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("empty support: a softmax row has all entries masked")
    shifted = data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        p = np.exp(out_data)
        _accumulate(logits, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (logits,), bwd)


def soft_cross_entropy(log_probs, target, axis=-1):
    """-sum(target * log_probs) along ``axis``.

    ``target`` is a constant probability vector (ndarray or Tensor treated as
    data). Entries with target == 0 contribute exactly 0 even when the
    log-probability there is -inf.
    """
    log_probs = _as_tensor(log_probs, "log_probs")
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != log_probs.data.shape:
        raise ValueError(f"target shape {tgt.shape} does not match log_probs shape {log_probs.data.shape}")
    terms = np.where(tgt > 0, tgt * log_probs.data, 0.0)
    out_data = -terms.sum(axis=axis)

    def bwd(g):
        _accumulate(log_probs, -tgt * np.expand_dims(g, axis))

    return _node(out_data, (log_probs,), bwd)


def linear(x, w, b):
    """x @ w + b convenience composite."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# numpy-level helpers shared with detached (non-trained) code paths
# ---------------------------------------------------------------------------


def softmax_np(logits, temperature=1.0, axis=-1):
    """Plain-array softmax with the same -inf sentinel semantics."""
    logits = np.asarray(logits)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    m = logits.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("empty support: a softmax row has all entries masked")
    z = np.exp((logits - m) / temperature)
    return z / z.sum(axis=axis, keepdims=True)


def normal_init(shape, rng, std=0.02, dtype=np.float32):
    """Seeded normal parameter initialization."""
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
