"""Finite-difference verification of reverse-mode gradients.

The harness re-evaluates a scalar loss under central perturbations of each
parameter component and compares against the recorded gradients. It is the
independent oracle for every differentiable block; run it in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grads


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_samples_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``f()`` against central differences.

    Returns max over all checked components of
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.

    ``f`` must rebuild its graph on every call and close over ``params``.
    When ``max_samples_per_param`` is set, a seeded random subset of each
    parameter's components is checked (needed to keep large-model checks
    inside a sane runtime); otherwise every component is.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("all checked parameters must have requires_grad=True")
        if p.dtype != np.float64:
            raise ValueError(f"grad_check runs in 64-bit mode, got a {p.dtype.name} parameter")

    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_samples_per_param is not None and n > max_samples_per_param:
            idx = rng.choice(n, size=max_samples_per_param, replace=False)
        else:
            idx = np.arange(n)
        g_flat = g_ad.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("grad_check: perturbed loss is not finite")
            g_fd = (hi - lo) / (2.0 * eps)
            g = float(g_flat[i])
            rel = abs(g - g_fd) / max(1.0, abs(g), abs(g_fd))
            if rel > worst:
                worst = rel
    return worst
