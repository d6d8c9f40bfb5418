"""Central finite-difference checks for analytic gradients (64-bit)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``leaf``.

    ``index`` optionally restricts the probe to a list of flat positions; the
    remaining entries are returned as NaN.
    """
    flat = leaf.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    for i in positions:
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(leaf.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-4,
                    max_probes: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> float:
    """Return the worst elementwise relative error over ``leaves``.

    Leaves must be float64 and ``requires_grad``. With ``max_probes`` only a
    random subset of entries per leaf is differenced.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = fn()
    gmap = backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = gmap.get(leaf)
        if analytic is None:
            analytic = np.zeros(leaf.shape)
        index = None
        if max_probes is not None and leaf.size > max_probes:
            rng = rng or np.random.default_rng(0)
            index = rng.choice(leaf.size, size=max_probes, replace=False)
        numeric = numerical_grad(fn, leaf, h, index)
        mask = ~np.isnan(numeric)
        err = relative_error(analytic[mask], numeric[mask], floor)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
