"""Reverse-mode vs central-difference gradient comparison."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import NonFiniteError, Tensor, no_grad


def _scalar(out: Tensor) -> Tensor:
    return out if out.data.size == 1 else ops.sum(out)


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autograd and finite-difference gradients.

    ``f`` is called with no arguments and must read ``inputs`` (the tensors
    are perturbed in place). A non-scalar output is sum-reduced. Error per
    coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = _scalar(f())
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite output in grad_check")
    out.backward()
    worst = 0.0
    for t in inputs:
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        g_fd = np.zeros(flat.size)
        with no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                fp = _scalar(f()).item()
                flat[i] = keep - eps
                fm = _scalar(f()).item()
                flat[i] = keep
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("non-finite value while differencing")
                g_fd[i] = (fp - fm) / (2 * eps)
        ga = g_ad.reshape(-1)
        err = np.abs(ga - g_fd) / np.maximum(1e-8, np.abs(ga) + np.abs(g_fd))
        if err.size:
            worst = max(worst, float(err.max()))
    for t in inputs:
        t.grad = None
    return worst


def weighted(out: Tensor, rng) -> Tensor:
    """Random projection of ``out`` to a scalar; avoids gradients that cancel under a plain sum."""
    w = rng.normal(size=out.shape)
    return ops.sum(ops.mul(out, w))
