"""AdamW with decoupled weight decay, and a central-difference gradient checker."""

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError


def adamw_step(params, lr, betas=(0.9, 0.999), weight_decay=1e-4, step=1, eps=1e-8, state=None):
    """One AdamW update in place.

    ``lr`` may be a float or a mapping from parameter group to learning rate.
    ``state`` holds the moment buffers keyed by ``id(param)``; pass the same
    dict on every call.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if state is None:
        state = {}
    b1, b2 = betas
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p in params:
        if not getattr(p, "trainable", True):
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite-grad", p.name or "<unnamed>")
        rate = lr[p.group] if isinstance(lr, dict) else lr
        m, v = state.get(id(p), (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state[id(p)] = (m, v)
        if weight_decay:
            p.data *= 1.0 - rate * weight_decay
        p.data -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), weight_decay=1e-4, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        adamw_step(self.params, self.lr, self.betas, self.weight_decay, self.step_count, self.eps, self.state)


def grad_check(fn, inputs, epsilon=1e-6, samples=None, rng=None, coords=None):
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` must return a scalar tensor. Relative error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. When ``samples`` is
    given, that many coordinates are drawn uniformly over all inputs; ``coords``
    (a list of (input index, flat index)) overrides the sampling.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    inputs = [ad.astensor(x) for x in inputs]
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)

    with ad.Tape() as tape:
        out = fn(*inputs)
    out = ad.astensor(out)
    if out.size != 1:
        raise ShapeError("non-scalar-objective", f"objective has shape {out.shape}")
    tape.backward(out)
    analytic = [x.grad.copy() for x in inputs]

    if coords is None:
        all_coords = [(k, i) for k, x in enumerate(inputs) for i in range(x.size)]
        if samples is not None and samples < len(all_coords):
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(all_coords), size=samples, replace=False)
            coords = [all_coords[i] for i in sorted(pick)]
        else:
            coords = all_coords

    worst = 0.0
    with ad.no_tape():
        for k, i in coords:
            flat = inputs[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(ad.astensor(fn(*inputs)).data)
            flat[i] = orig - epsilon
            fm = float(ad.astensor(fn(*inputs)).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
