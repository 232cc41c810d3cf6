"""Finite-difference verification of analytic gradients.

The numeric side only ever calls the forward pass, so it stays independent
of the backward implementation it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(build_loss: Callable[[], Tensor], leaf: Tensor,
                     eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of build_loss() w.r.t. one leaf tensor.

    ``build_loss`` must rebuild the forward graph from the leaves' current
    data on every call and return a scalar Tensor.
    """
    flat = leaf.data.reshape(-1)
    num = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = build_loss().item()
        flat[i] = orig - eps
        fm = build_loss().item()
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * eps)
    return num.reshape(leaf.data.shape)


def max_relative_error(build_loss: Callable[[], Tensor], leaves: Sequence[Tensor],
                       eps: float = 1e-6) -> float:
    """Worst elementwise relative error between analytic and numeric gradients.

    The denominator is floored at 1e-3 so near-zero entries are compared
    absolutely rather than blowing up the ratio.
    """
    for leaf in leaves:
        leaf.grad = None
    build_loss().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_gradient(build_loss, leaf, eps=eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
