"""Adam and gradient utilities for :class:`Parameter` collections."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters without a gradient are skipped. Gradients are left untouched;
    the caller zeroes them. Row 0 of padded tables is never moved.
    """
    b1, b2 = betas
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if p.pad_row:
            g = g.copy()
            g[0] = 0.0
        p.step_count += 1
        p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
        p.adam_v = b2 * p.adam_v + (1.0 - b2) * g * g
        m_hat = p.adam_m / (1.0 - b1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - b2 ** p.step_count)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if p.pad_row:
            update[0] = 0.0
        p.data -= update


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
