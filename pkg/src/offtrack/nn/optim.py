import math

import numpy as np

from .params import ParamStore


class NonFiniteGradient(FloatingPointError):
    pass


def adamw_step(store: ParamStore, grads=None, lr=1e-3, weight_decay=0.01,
               betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update with decoupled weight decay, applied in place.

    ``grads`` maps parameter name to gradient array; by default the
    ``.grad`` fields of the stored tensors are used. Parameters without a
    gradient are left untouched (their moments do not advance either).
    """
    if grads is None:
        grads = {k: t.grad for k, t in store.items() if t.grad is not None}
    for k, g in grads.items():
        if k not in store:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {k!r}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, g in grads.items():
        p = store[k]
        g = np.asarray(g, dtype=p.dtype)
        m = store.m.get(k)
        v = store.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.m[k] = m
        store.v[k] = v
        data = p.data * (1.0 - lr * weight_decay)
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return store


def step_decay_lr(base_lr: float, epoch: int, factor: float, every: int = 10) -> float:
    """Learning rate after ``epoch`` full epochs, decayed by ``factor`` every ``every``."""
    return base_lr * factor ** (epoch // every)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum())
                          for t in store.params.values() if t.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in store.params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total
