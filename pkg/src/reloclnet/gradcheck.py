"""Central-difference gradient verification in 64-bit arithmetic."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, default_dtype, no_grad, trace_kinks


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: list = field(default_factory=list)
    worst: tuple = None

    def passed(self, tol=1e-4):
        return self.max_rel_error <= tol


def _signature(trace):
    return tuple(a.tobytes() for a in trace)


def gradient_check(f, point, h=1e-3, max_elements=None, rng=None, order=2):
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``point`` is either an array (``f`` is then called with one Tensor) or a
    list of parameter Tensors that are perturbed in place (``f`` is called
    with no arguments). Elements whose perturbation flips a relu/max branch
    are skipped and listed in ``excluded`` as ``(tensor_index, flat_index)``.

    The error per element is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    ``order=4`` uses the five-point central stencil (steps h and 2h), whose
    truncation error is O(h^4) instead of O(h^2).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    steps = (h,) if order == 2 else (h, 2 * h)
    with default_dtype(np.float64):
        if isinstance(point, (list, tuple)):
            params = list(point)
            saved = [p.data for p in params]
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None

            def evaluate():
                return f()
        else:
            params = [Tensor(np.asarray(point, dtype=np.float64), requires_grad=True)]
            saved = None

            def evaluate():
                return f(params[0])

        try:
            with trace_kinks() as base_trace:
                loss = evaluate()
            base = _signature(base_trace)
            loss.backward()
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

            candidates = [(ti, fi) for ti, p in enumerate(params) for fi in range(p.data.size)]
            if max_elements is not None and len(candidates) > max_elements:
                rng = rng or np.random.default_rng(0)
                pick = rng.choice(len(candidates), size=max_elements, replace=False)
                candidates = [candidates[i] for i in sorted(pick)]

            worst, worst_at = 0.0, None
            checked = 0
            excluded = []
            with no_grad():
                for ti, fi in candidates:
                    flat = params[ti].data.reshape(-1)
                    orig = flat[fi]
                    diffs, kinked = [], False
                    for step in steps:
                        vals = []
                        for sign in (1.0, -1.0):
                            flat[fi] = orig + sign * step
                            with trace_kinks() as tr:
                                vals.append(float(evaluate().data))
                            kinked = kinked or _signature(tr) != base
                        diffs.append(vals[0] - vals[1])
                    flat[fi] = orig
                    if kinked:
                        excluded.append((ti, fi))
                        continue
                    if order == 2:
                        g_fd = diffs[0] / (2.0 * h)
                    else:
                        g_fd = (8.0 * diffs[0] - diffs[1]) / (12.0 * h)
                    g_ad = float(analytic[ti].reshape(-1)[fi])
                    err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
                    if err > worst:
                        worst, worst_at = err, (ti, fi, g_ad, g_fd)
                    checked += 1
        finally:
            if saved is not None:
                for p, old in zip(params, saved):
                    p.data = old
                    p.grad = None
    return GradCheckResult(max_rel_error=worst, checked=checked, excluded=excluded, worst=worst_at)
