"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np


def grad_check(loss_fn, params, eps: float = 1e-5, n_coords: int = 256, rng=None, floor: float = 1e-5,
               details: bool = False):
    """Max relative error between analytic and numeric gradients.

    ``loss_fn(params) -> (loss, grads)`` with ``grads`` a name -> array dict.
    Coordinates are sampled so every tensor contributes at least two
    (or all of its entries when smaller); at least 64 are checked overall.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    total = params.n_params()
    budget = max(64, n_coords)
    picks = []
    for name, arr in params.items():
        k = min(arr.size, max(2, int(round(budget * arr.size / total))))
        for flat in rng.choice(arr.size, size=k, replace=False):
            picks.append((name, int(flat)))
    worst = 0.0
    rows = []
    for name, flat in picks:
        arr = params[name].reshape(-1)
        old = arr[flat]
        arr[flat] = old + eps
        lp = loss_fn(params)[0]
        arr[flat] = old - eps
        lm = loss_fn(params)[0]
        arr[flat] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss while perturbing {name}[{flat}]")
        num = (lp - lm) / (2 * eps)
        g = grads.get(name)
        ana = 0.0 if g is None else float(g.reshape(-1)[flat])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, rel)
        rows.append((name, flat, ana, num, rel))
    if details:
        return worst, rows
    return worst
