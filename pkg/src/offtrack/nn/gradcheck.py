from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f, inputs, tol=1e-4, step=1e-5, floor=1e-5, seed=0, max_entries=None):
    """Compare backprop gradients of ``f`` with central finite differences.

    ``f`` maps the tensors in ``inputs`` (a Tensor or list of Tensors,
    float64, ``requires_grad=True``) to any Tensor; a fixed random
    projection turns that into a scalar. The relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` subsamples the
    entries probed per input (analytic gradients are still complete).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    rng = np.random.default_rng(seed)
    out0 = f(*inputs) if len(inputs) > 1 else f(inputs[0])
    proj = rng.standard_normal(out0.shape) / np.sqrt(max(out0.data.size, 1))

    def scalar():
        with_grad = f(*inputs) if len(inputs) > 1 else f(inputs[0])
        return float((with_grad.data * proj).sum())

    for x in inputs:
        x.grad = None
    out = f(*inputs) if len(inputs) > 1 else f(inputs[0])
    (out * Tensor(proj)).sum().backward()

    max_rel = 0.0
    max_abs = 0.0
    n = 0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = scalar()
            flat[i] = orig - step
            down = scalar()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num)
            rel = err / max(abs(a), abs(num), floor)
            max_rel = max(max_rel, rel)
            max_abs = max(max_abs, err)
            n += 1
    return GradCheckReport(max_rel, max_abs, n, tol)
