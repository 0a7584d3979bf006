"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a closure that maps
the output gradient to input gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order exactly once; afterwards the
graph is released and a second backward raises :class:`UsageError`.

Arithmetic runs in the default dtype (float32) unless a
:func:`default_dtype` context selects float64, which gradient checks use.
"""

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, DimensionError, DomainError, NonFiniteError, UsageError

__all__ = [
    "Tensor",
    "tensor",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "trace_kinks",
    "add",
    "mul",
    "matmul",
    "sum",
    "mean",
    "exp",
    "log",
    "relu",
    "softplus",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "masked_softmax",
    "masked_log_softmax",
    "masked_max",
    "logsumexp",
    "layer_norm",
    "l2_normalize",
    "conv1d",
    "dropout",
]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.kinks = None


_state = _State()


def get_default_dtype():
    return _state.dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; results never require grad."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled():
    return _state.grad_enabled


@contextlib.contextmanager
def trace_kinks():
    """Collect the branch decisions taken by piecewise ops (relu, max).

    The yielded list receives one array per piecewise op evaluated inside
    the context. Two evaluations whose traces differ straddle a kink.
    """
    prev = _state.kinks
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def _record_kink(branch):
    if _state.kinks is not None:
        _state.kinks.append(np.array(branch, copy=True))


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-d array of floats with optional gradient tracking."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        if arr.dtype.kind != "f":
            raise DimensionError(f"tensor data must be floating point, got {arr.dtype}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    # -- introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- operators -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other, self), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    # -- autodiff ------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf tensor."""
        if self._consumed:
            raise UsageError("backward called on a graph that was already consumed")
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError("seed gradient must match the tensor shape")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._consumed:
                raise UsageError("graph contains a tensor consumed by an earlier backward")
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                _check_finite(pg, f"gradient of {node._op}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise -----------------------------------------------------------


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def power(a, exponent):
    exponent = float(exponent)
    ad = a.data
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),), "pow")


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a):
    """max(0, x); at x == 0 the zero branch is taken (gradient 0)."""
    active = a.data > 0
    _record_kink(active)
    return _make(np.where(active, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * active,), "relu")


def softplus(a):
    """log(1 + e^x), evaluated without overflow for large |x|."""
    ad = a.data
    y = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _make(y.astype(ad.dtype), (a,), lambda g: (g * sig,), "softplus")


# -- reductions and shape ops --------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index):
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], copy=True), (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    """Batched matrix product; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


# -- fused numerics ---------------------------------------------------------


def _valid_mask(mask, shape, axis):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not m.any(axis=axis).all():
        raise DomainError("every position along the normalised axis is masked")
    return m


def masked_softmax(x, mask=None, axis=-1):
    """Softmax over valid positions; masked positions are exactly zero."""
    m = _valid_mask(mask, x.shape, axis)
    z = np.where(m, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(x.data.dtype)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "masked_softmax")


def masked_log_softmax(x, mask=None, axis=-1):
    """log of :func:`masked_softmax`; masked positions hold 0 and get no gradient."""
    m = _valid_mask(mask, x.shape, axis)
    z = np.where(m, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = np.where(m, z - lse, 0.0).astype(x.data.dtype)
    y = np.where(m, np.exp(out), 0.0)

    def backward(g):
        gm = np.where(m, g, 0.0)
        return ((gm - y * gm.sum(axis=axis, keepdims=True)).astype(g.dtype),)

    return _make(out, (x,), backward, "masked_log_softmax")


def logsumexp(x, mask=None, axis=None):
    """log(sum(exp(x))) over valid entries along ``axis`` (all axes if None)."""
    m = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=axis).all():
        raise DomainError("logsumexp over an empty set")
    z = np.where(m, x.data, -np.inf)
    top = z.max(axis=axis, keepdims=True)
    e = np.exp(z - top)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + top).astype(x.data.dtype)
    w = (e / s).astype(x.data.dtype)
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def backward(g):
        if axis is None:
            return (w * g,)
        return (w * np.expand_dims(g, axis),)

    return _make(out, (x,), backward, "logsumexp")


def masked_max(x, mask=None, axis=-1):
    """Max over valid positions; ties resolve to the first index."""
    m = _valid_mask(mask, x.shape, axis)
    z = np.where(m, x.data, -np.inf)
    idx = np.expand_dims(np.argmax(z, axis=axis), axis)
    _record_kink(idx)
    out = np.squeeze(np.take_along_axis(x.data, idx, axis=axis), axis=axis)
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), backward, "masked_max")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit population variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    y = (xhat * gd + bias.data).astype(xd.dtype)

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, g * xhat, g

    return _make(y, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / max(||x||, eps) along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = (xd / denom).astype(xd.dtype)
    clipped = norm <= eps

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g, g - y * proj) / denom,)

    return _make(y, (x,), backward, "l2_normalize")


def conv1d(x, kernels):
    """Cross-correlation along the last axis with zero 'same' padding.

    ``x`` is (c_in, n) or (batch, c_in, n); ``kernels`` is (c_out, c_in, w)
    with odd ``w``. The output keeps the input length.
    """
    width = kernels.shape[-1]
    if width % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {width}")
    if kernels.ndim != 3 or x.ndim not in (2, 3) or x.shape[-2] != kernels.shape[1]:
        raise DimensionError(f"conv1d shapes incompatible: x{x.shape}, kernels{kernels.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    wd = kernels.data
    pad = (width - 1) // 2
    n = xd.shape[-1]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xp, width, axis=-1)
    out = np.einsum("bcnk,ock->bon", windows, wd).astype(xd.dtype)

    def backward(g):
        g3 = g[None] if squeeze else g
        dw = np.einsum("bcnk,bon->ock", windows, g3).astype(wd.dtype)
        dxp = np.zeros_like(xp)
        for j in range(width):
            dxp[:, :, j : j + n] += np.einsum("bon,oc->bcn", g3, wd[:, :, j])
        dx = dxp[:, :, pad : pad + n]
        return (dx[0] if squeeze else dx), dw

    return _make(out[0] if squeeze else out, (x, kernels), backward, "conv1d")


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity outside training or when ``rate`` is 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.data.dtype))
