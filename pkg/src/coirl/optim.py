"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def adamw_step(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update on numpy arrays. Returns the new step count.

    ``step`` is the number of updates already applied to this parameter.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(f"adamw_step: shape mismatch {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    b1, b2 = betas
    step += 1
    if weight_decay:
        param -= lr * weight_decay * param
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return step


class AdamW:
    """Keeps per-parameter moments keyed by parameter name.

    Only the parameters passed to :meth:`step` are touched, which lets the
    trainer run phase-specific updates (IL phase, RL phase) through a single
    optimizer instance.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def _slot(self, name, p):
        st = self.state.get(name)
        if st is None:
            st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "step": 0}
            self.state[name] = st
        return st

    def step(self, params, lr):
        for name, p in params.items():
            if p.grad is None:
                continue
            st = self._slot(name, p)
            st["step"] = adamw_step(p.data, p.grad, st["m"], st["v"], st["step"], lr,
                                    self.betas, self.eps, self.weight_decay)

    def reset(self, names):
        """Zero the moments (and step counters) of the named parameters."""
        for name in names:
            st = self.state.get(name)
            if st is not None:
                st["m"][...] = 0
                st["v"][...] = 0
                st["step"] = 0


def zero_grad(params):
    for p in params.values():
        p.grad = None


def lr_at(it, peak, total, warmup, floor=0.0):
    """Linear warmup to ``peak`` at iteration ``warmup``, then cosine down to ``floor``."""
    if warmup > 0 and it < warmup:
        return peak * (it + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, max(0.0, (it - warmup) / span))
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * frac))
