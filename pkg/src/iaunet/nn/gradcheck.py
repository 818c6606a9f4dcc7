"""Central finite-difference gradient checks.

Error metric: for each checked tensor, ``max_i |analytic_i - numeric_i|``
divided by ``max_i |analytic_i|`` over the whole tensor (infinity-norm relative
error). Tensors whose analytic gradient is identically zero fall back to the
absolute error.
"""

import numpy as np

from .tensor import Tensor, no_grad


def _rel(diff, scale):
    return diff / scale if scale > 0 else diff


def check_gradients(fn, inputs, h=1e-6, seed=0):
    """Compare analytic and numeric gradients of ``sum(R * fn(*inputs))``.

    ``inputs`` are float64 Tensors; every element of every input that has
    ``requires_grad`` is perturbed. ``R`` is a fixed random projection so each
    output element contributes. Returns the max relative error over inputs.
    """
    out = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    loss = (out * Tensor(proj)).sum()
    for t in inputs:
        t.grad = None
    loss.backward()

    def value():
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        scale = np.abs(analytic).max()
        worst = max(worst, _rel(np.abs(analytic - numeric).max(), scale))
    return worst


def check_sampled(loss_fn, params, coords_per_param=2, h=1e-7, seed=0):
    """Spot-check ``d loss / d param`` at a few coordinates of each parameter.

    ``loss_fn()`` must build a fresh scalar loss on every call (parameters are
    read live). Per parameter, the coordinate with the largest analytic
    gradient plus ``coords_per_param - 1`` random ones are checked.
    Returns ``(max_rel_error, rows)`` with one row per checked coordinate.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    grads = {id(p): p.grad.copy() for p in params}
    rows = []
    worst = 0.0
    for p in params:
        g = grads[id(p)]
        flat = p.data.reshape(-1)
        scale = np.abs(g).max()
        picks = [int(np.abs(g).argmax())]
        picks += [int(i) for i in rng.integers(0, flat.size, size=coords_per_param - 1)]
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = float(g.reshape(-1)[i])
            err = _rel(abs(ana - num), scale)
            worst = max(worst, err)
            rows.append((getattr(p, "name", ""), i, ana, num, err))
    return worst, rows
