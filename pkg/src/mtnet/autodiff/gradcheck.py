"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def _scalar(out: Tensor) -> float:
    value = out.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"f(x) is not finite: {value}")
    return value


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    ``x`` is perturbed in place and restored, so ``f`` may close over a model
    whose parameter *is* ``x``. With ``n_samples`` only that many randomly
    chosen elements are probed. Run in float64; at float32 the differences
    are dominated by rounding.

    The per-element error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    if n_samples is None or n_samples >= flat.size:
        indices = np.arange(flat.size)
    else:
        indices = np.random.default_rng(seed).choice(flat.size, size=n_samples, replace=False)

    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
