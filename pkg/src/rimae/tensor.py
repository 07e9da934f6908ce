"""Dense float tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph once in reverse topological order and then
releases it, so a second call on the same loss is an error.

Binary operations accept either identical shapes or an operand whose shape
equals the trailing dimensions of the other (leading-batch broadcast). Nothing
else broadcasts.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .exceptions import DimensionError, NumericError, UsageError

_DTYPE = np.float64
_state = threading.local()

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype):
    """Switch the storage dtype (float64 by default, float32 allowed)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar():
    raise UsageError("item() requires a single-element tensor")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._released = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and release the graph."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss._released:
        raise UsageError("graph already released by a previous backward; run forward again")
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not attached to any tensor that requires grad")

    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._released = True
    loss._released = True


# ---------------------------------------------------------------- broadcasting

def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return None
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "b"
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return "a"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _scalar_operand(x):
    return isinstance(x, (int, float, np.floating, np.integer))


# -------------------------------------------------------------- elementwise ops

def add(a, b):
    if _scalar_operand(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    if _scalar_operand(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if _scalar_operand(b):
        return add(a, -b)
    if _scalar_operand(a):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    if _scalar_operand(b):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    if _scalar_operand(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


# ------------------------------------------------------------------- structure

def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across the leading dims of ``a``
    or carries exactly the same leading dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def einsum(spec, a, b):
    """Two-operand einsum; every input index must appear in the other operand or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out = spec.replace(" ", "").split("->")
    ia, ib = ins.split(",")
    for mine, other in ((ia, ib), (ib, ia)):
        for ch in mine:
            if ch not in other and ch not in out:
                raise DimensionError(f"einsum: index {ch!r} is summed within one operand")
    try:
        data = np.einsum(spec, a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec}: {exc}") from None
    ad, bd = a.data, b.data
    return _make(data, (a, b),
                 lambda g: (np.einsum(f"{out},{ib}->{ia}", g, bd),
                            np.einsum(f"{out},{ia}->{ib}", g, ad)), "einsum")


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {old} -> {shape}: {exc}") from None
    return _make(data, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def gather(x, index):
    """Per-sample row gather: ``out[b, v] = x[b, index[b, v]]``.

    ``x`` has shape (B, G, ...) and ``index`` integer shape (B, V).
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather: index shape {index.shape} does not match {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return _make(x.data[rows, index], (x,), back, "gather")


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def amax(x, axis):
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx, axis=axis).squeeze(axis), (x,), back, "amax")


# ---------------------------------------------------------------- nn primitives

def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


softmax_lastdim = softmax


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0):
        # eps=0 on a constant row: define the normalized row as zero
        denom = np.where(denom <= 0, 1.0, denom)
    inv = 1.0 / np.sqrt(denom)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layernorm")


def mse(a, b):
    """Mean over rows of the squared L2 distance between matching rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    rows = diff.size // diff.shape[-1] if diff.ndim else 1
    scale = 2.0 / rows
    return _make(np.asarray((diff * diff).sum() / rows), (a, b),
                 lambda g: (g * scale * diff, -g * scale * diff), "mse")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy for integer class labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(-logp[rows, labels].mean()), (logits,), back, "cross_entropy")


def chamfer_l2(pred, target):
    """Symmetric squared-distance Chamfer loss averaged over all leading dims.

    ``pred`` (..., P, 3) and ``target`` (..., Q, 3).
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape[:-2] != target.shape[:-2] or pred.shape[-1] != target.shape[-1]:
        raise DimensionError(f"chamfer_l2: shapes {pred.shape} and {target.shape}")
    p, t = pred.data, target.data
    diff = p[..., :, None, :] - t[..., None, :, :]
    d = (diff * diff).sum(-1)
    jmin = d.argmin(-1)
    imin = d.argmin(-2)
    lead = int(np.prod(p.shape[:-2])) if p.ndim > 2 else 1
    P, Q = p.shape[-2], t.shape[-2]
    near_t = np.take_along_axis(t, jmin[..., None], axis=-2)
    near_p = np.take_along_axis(p, imin[..., None], axis=-2)
    value = (np.take_along_axis(d, jmin[..., None], -1).sum() / (lead * P)
             + np.take_along_axis(d, imin[..., None, :], -2).sum() / (lead * Q))

    def back(g):
        gp_fwd = 2.0 * (p - near_t) / (lead * P)
        gt_bwd = 2.0 * (t - near_p) / (lead * Q)
        gp = gp_fwd.copy()
        gt = gt_bwd.copy()
        flat_p = gp.reshape(-1, P, 3)
        flat_t = gt.reshape(-1, Q, 3)
        fj = jmin.reshape(-1, P)
        fi = imin.reshape(-1, Q)
        gpf = gp_fwd.reshape(-1, P, 3)
        gtf = gt_bwd.reshape(-1, Q, 3)
        for n in range(flat_p.shape[0]):
            np.add.at(flat_t[n], fj[n], -gpf[n])
            np.add.at(flat_p[n], fi[n], -gtf[n])
        return g * gp, g * gt

    return _make(np.asarray(value), (pred, target), back, "chamfer_l2")
