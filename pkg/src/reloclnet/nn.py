"""Layers the encoders are assembled from.

Sequences are laid out as ``(batch, length, dim)`` with a boolean
``(batch, length)`` mask marking real positions.
"""

import math

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError, DomainError
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise DimensionError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class Dropout(Module):
    """Inverted dropout drawing masks from a generator shared with the model."""

    def __init__(self, rate):
        self.rate = float(rate)
        self.rng = np.random.default_rng(0)

    def __call__(self, x):
        return T.dropout(x, self.rate, self.rng, training=self.training)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x, context, context_mask, return_weights=False):
        batch, n, d = x.shape
        m = context.shape[1]
        h, dh = self.heads, d // self.heads
        if context.shape[-1] != d:
            raise DimensionError("query and key/value sequences must share the model dim")
        q = self.query(x).reshape(batch, n, h, dh).transpose(0, 2, 1, 3)
        k = self.key(context).reshape(batch, m, h, dh).transpose(0, 2, 3, 1)
        v = self.value(context).reshape(batch, m, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh))
        mask = np.asarray(context_mask, dtype=bool)[:, None, None, :]
        weights = T.masked_softmax(scores, mask, axis=-1)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, n, d)
        out = self.out(mixed)
        return (out, weights) if return_weights else out


class FeedForward(Module):
    def __init__(self, d, d_ff, rng):
        self.inner = Linear(d, d_ff, rng)
        self.outer = Linear(d_ff, d, rng)

    def __call__(self, x):
        return self.outer(T.relu(self.inner(x)))


class TransformerBlock(Module):
    """Post-norm block: LN(x + MHA(x, ctx)) followed by LN(y + FFN(y)).

    Passing ``context`` turns the block into a co-attentional block whose
    queries come from ``x`` and keys/values from ``context``.
    """

    def __init__(self, d, heads, d_ff, dropout, rng, eps=1e-5):
        self.attention = MultiHeadAttention(d, heads, rng)
        self.ln1 = LayerNorm(d, eps)
        self.ffn = FeedForward(d, d_ff, rng)
        self.ln2 = LayerNorm(d, eps)
        self.drop = Dropout(dropout)

    def __call__(self, x, mask, context=None, context_mask=None):
        if context is None:
            context, context_mask = x, mask
        elif context_mask is None:
            context_mask = mask
        y = self.ln1(x + self.drop(self.attention(x, context, context_mask)))
        return self.ln2(y + self.drop(self.ffn(y)))


class CoAttentionBlock(TransformerBlock):
    def __call__(self, x, y, mask, y_mask=None):
        return super().__call__(x, mask, context=y, context_mask=mask if y_mask is None else y_mask)


class AdditivePool(Module):
    """Softmax(w . h_i) weighted average of the valid rows of a sequence."""

    def __init__(self, d, rng):
        self.weight = Parameter(_uniform(rng, (d, 1), d))

    def attention(self, h, mask):
        scores = (h @ self.weight).reshape(h.shape[0], h.shape[1])
        return T.masked_softmax(scores, mask, axis=-1)

    def __call__(self, h, mask):
        squeeze = h.ndim == 2
        if squeeze:
            h = h.reshape(1, *h.shape)
            mask = np.asarray(mask, dtype=bool)[None]
        if h.shape[1] == 0:
            raise DomainError("cannot pool an empty sequence")
        alpha = self.attention(h, mask)
        pooled = (alpha.reshape(h.shape[0], 1, h.shape[1]) @ h).reshape(h.shape[0], h.shape[2])
        return pooled.reshape(h.shape[2]) if squeeze else pooled


class PositionalEmbedding(Module):
    def __init__(self, n_max, d, rng):
        self.table = Parameter(rng.normal(0.0, 0.02, size=(n_max, d)))

    @property
    def n_max(self):
        return self.table.shape[0]

    def __call__(self, x):
        n = x.shape[-2]
        if n > self.n_max:
            raise ConfigError(f"sequence length {n} exceeds positional table size {self.n_max}")
        return x + self.table[:n]


class BoundaryPredictor(Module):
    """Independent single-layer start/end convolutions over similarity scores."""

    def __init__(self, width, rng):
        if width % 2 == 0:
            raise ConfigError(f"boundary kernel width must be odd, got {width}")
        self.start_kernel = Parameter(_uniform(rng, (1, 1, width), width))
        self.end_kernel = Parameter(_uniform(rng, (1, 1, width), width))

    def __call__(self, scores, mask):
        squeeze = scores.ndim == 1
        if squeeze:
            scores = scores.reshape(1, -1)
            mask = np.asarray(mask, dtype=bool)[None]
        batch, n = scores.shape
        # padded positions must contribute nothing to the windows of valid ones
        x = (scores * np.asarray(mask, dtype=scores.dtype)).reshape(batch, 1, n)
        start = T.conv1d(x, self.start_kernel).reshape(batch, n)
        end = T.conv1d(x, self.end_kernel).reshape(batch, n)
        if squeeze:
            return start.reshape(n), end.reshape(n)
        return start, end
