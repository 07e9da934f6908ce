"""AdamW with linear warm-up + cosine decay, and the EMA momentum ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(step, base_lr, warmup_steps, total_steps):
    """Linear ramp 0 -> base_lr over ``warmup_steps``, then cosine decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_momentum(step, total_steps, m0, schedule="cosine"):
    """Teacher momentum: constant ``m0`` or a cosine ramp from ``m0`` to 1."""
    if schedule == "constant" or total_steps <= 0:
        return m0
    progress = min(step / total_steps, 1.0)
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * progress) + 1.0) / 2.0


@dataclass
class OptimState:
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_steps: int = 0
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, optim_cfg, steps_per_epoch, total_steps):
        return cls(
            base_lr=optim_cfg.base_lr,
            weight_decay=optim_cfg.weight_decay,
            warmup_steps=int(round(optim_cfg.warmup_epochs * steps_per_epoch)),
            total_steps=total_steps,
            beta1=optim_cfg.beta1,
            beta2=optim_cfg.beta2,
            eps=optim_cfg.eps,
        )

    def lr(self, step=None):
        s = self.step if step is None else step
        return cosine_lr(s, self.base_lr, self.warmup_steps, self.total_steps)


def adamw_step(params, grads, opt):
    """One decoupled-weight-decay Adam update, in place.

    ``grads`` maps the same names as ``params`` to arrays (``None`` counts as
    zero). Returns the learning rate that was applied.
    """
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    lr = opt.lr()
    t = opt.step + 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        opt.m[name] = m
        opt.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = p.data - lr * (update + opt.weight_decay * p.data)
    opt.step = t
    return lr


def grads_of(params):
    return {k: v.grad for k, v in params.items()}
