"""Central finite-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from gfkd.tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-4,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` maps a list of tensors (built from ``params``) to a scalar tensor.
    Every coordinate is probed unless ``coords`` is given, in which case that
    many coordinates are drawn per parameter (without replacement) from ``rng``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(p, requires_grad=True) for p in params]
    grads = backward(f(leaves))
    analytic = [grads[t] for t in leaves]

    def value(arrays):
        return float(f([Tensor(a) for a in arrays]).data)

    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for idx, p in enumerate(params):
        flat_ids = np.arange(p.size)
        if coords is not None and coords < p.size:
            flat_ids = rng.choice(p.size, size=coords, replace=False)
        for j in flat_ids:
            plus = [a.copy() for a in params]
            minus = [a.copy() for a in params]
            plus[idx].flat[j] += h
            minus[idx].flat[j] -= h
            numeric = (value(plus) - value(minus)) / (2 * h)
            err = relative_error(np.asarray(analytic[idx].flat[j]), np.asarray(numeric))
            worst = max(worst, float(err))
    return worst


def finite_diff_check_named(
    f: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray],
    h: float = 1e-4,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """:func:`finite_diff_check` over a name -> array mapping."""
    names = list(params)
    return finite_diff_check(
        lambda ts: f(dict(zip(names, ts))), [params[n] for n in names], h=h, coords=coords, rng=rng
    )
