"""AdamW with decoupled weight decay and a linear warmup schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_proportion: float = 0.01
    total_steps: int = 1
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    @property
    def warmup_steps(self):
        return int(math.ceil(self.warmup_proportion * self.total_steps))

    def lr_at(self, step):
        """Learning rate for 1-based ``step``: linear ramp from 0, then constant."""
        warm = self.warmup_steps
        if warm <= 0 or step >= warm:
            return self.lr
        return self.lr * step / warm


def adamw_step(params, grads, state, decay_mask=None):
    """Apply one AdamW update in place and return ``params``.

    ``params`` and ``grads`` are parallel sequences of arrays (or tensors
    whose ``.data`` is updated). ``decay_mask[i]`` False exempts parameter
    ``i`` from weight decay.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        theta = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g is None:
            g = np.zeros_like(theta)
        g = np.asarray(g, dtype=theta.dtype)
        if g.shape != theta.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {theta.shape}")
        m = state.exp_avg.get(i)
        v = state.exp_avg_sq.get(i)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.exp_avg[i] = m
        state.exp_avg_sq[i] = v
        if decay_mask is None or decay_mask[i]:
            theta -= (lr * state.weight_decay) * theta
        theta -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(theta.dtype)
    return params


class AdamW:
    """Optimizer bound to a list of named parameters.

    Biases, layer-norm parameters and positional tables are exempt from
    weight decay.
    """

    no_decay_markers = ("bias", "ln1.", "ln2.", "table")

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, warmup_proportion=0.01, total_steps=1):
        if lr <= 0 or total_steps < 1:
            raise ConfigError("lr must be positive and total_steps >= 1")
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.decay_mask = [not any(k in n for k in self.no_decay_markers) for n in self.names]
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay, warmup_proportion=warmup_proportion,
                                    total_steps=total_steps)

    @property
    def current_lr(self):
        return self.state.lr_at(max(self.state.step, 1))

    def step(self):
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.decay_mask)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
