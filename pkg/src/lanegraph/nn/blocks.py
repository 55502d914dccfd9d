"""MLP, gated recurrent cell and attentive graph propagation with hand-written backward passes.

Every block follows the same shape:

    y, cache = X_forward(ps, prefix, ...)
    dx = X_backward(ps, prefix, cache, dy, grads)   # accumulates into grads[name]

Hidden nonlinearity is SiLU (x * sigmoid(x)). It is smooth, so central
differences do not straddle kinks during gradient checks.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .._kernels import scatter_add_rows
from .params import ParamStore, glorot


def silu(x):
    s = expit(x)
    return x * s, s


def dsilu(x, s):
    return s * (1 + x * (1 - s))


def _acc(grads, name, value):
    if grads is None:
        return
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


# ---------------------------------------------------------------- MLP

def mlp_init(ps: ParamStore, prefix: str, sizes, rng, zero_last: bool = False):
    sizes = list(sizes)
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        ps.add(f"{prefix}.W{i}", np.zeros((a, b)) if (zero_last and last) else glorot(rng, a, b))
        ps.add(f"{prefix}.b{i}", np.zeros(b))


def mlp_depth(ps, prefix) -> int:
    n = 0
    while f"{prefix}.W{n}" in ps:
        n += 1
    if n == 0:
        raise KeyError(f"no MLP parameters under {prefix!r}")
    return n


def mlp_forward(ps, prefix, x, keep_cache: bool = True):
    n = mlp_depth(ps, prefix)
    W0 = ps[f"{prefix}.W0"]
    if x.shape[-1] != W0.shape[0]:
        raise ValueError(f"{prefix}.W0 expects {W0.shape[0]} input features, got x with shape {x.shape}")
    cache = []
    h = x
    for i in range(n):
        z = h @ ps[f"{prefix}.W{i}"] + ps[f"{prefix}.b{i}"]
        if i < n - 1:
            a, s = silu(z)
            if keep_cache:
                cache.append((h, z, s))
            h = a
        else:
            if keep_cache:
                cache.append((h, None, None))
            h = z
    return h, cache


def mlp_backward(ps, prefix, cache, dy, grads):
    d = dy
    for i in range(len(cache) - 1, -1, -1):
        h, z, s = cache[i]
        if z is not None:
            d = d * dsilu(z, s)
        _acc(grads, f"{prefix}.W{i}", h.T @ d)
        _acc(grads, f"{prefix}.b{i}", d.sum(0))
        d = d @ ps[f"{prefix}.W{i}"].T
    return d


def mlp_apply(params, x, prefix: str = "mlp"):
    """Forward pass only."""
    return mlp_forward(params, prefix, np.asarray(x, dtype=params.dtype), keep_cache=False)[0]


# ---------------------------------------------------------------- GRU

def gru_init(ps: ParamStore, prefix: str, n_in: int, H: int, rng):
    ps.add(f"{prefix}.Wi", glorot(rng, n_in, H, (n_in, 3 * H)))
    ps.add(f"{prefix}.Wh", glorot(rng, H, H, (H, 3 * H)))
    ps.add(f"{prefix}.bi", np.zeros(3 * H))
    ps.add(f"{prefix}.bh", np.zeros(3 * H))


def gru_forward(ps, prefix, h, x, keep_cache: bool = True):
    """r, z gates and candidate n; h' = (1 - z) * n + z * h."""
    Wi, Wh = ps[f"{prefix}.Wi"], ps[f"{prefix}.Wh"]
    H = Wh.shape[0]
    if h.shape[-1] != H:
        raise ValueError(f"{prefix}.Wh expects state width {H}, got state with shape {h.shape}")
    if x.shape[-1] != Wi.shape[0]:
        raise ValueError(f"{prefix}.Wi expects {Wi.shape[0]} input features, got input with shape {x.shape}")
    gi = x @ Wi + ps[f"{prefix}.bi"]
    gh = h @ Wh + ps[f"{prefix}.bh"]
    r = expit(gi[:, :H] + gh[:, :H])
    z = expit(gi[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * ghn)
    out = (1 - z) * n + z * h
    return out, ((h, x, r, z, n, ghn) if keep_cache else None)


def gru_backward(ps, prefix, cache, dout, grads):
    """Returns (dh, dx)."""
    h, x, r, z, n, ghn = cache
    dn = dout * (1 - z)
    dz = dout * (h - n)
    dh = dout * z
    dan = dn * (1 - n * n)
    dar = dan * ghn * r * (1 - r)
    daz = dz * z * (1 - z)
    dgi = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    _acc(grads, f"{prefix}.Wi", x.T @ dgi)
    _acc(grads, f"{prefix}.bi", dgi.sum(0))
    _acc(grads, f"{prefix}.Wh", h.T @ dgh)
    _acc(grads, f"{prefix}.bh", dgh.sum(0))
    dx = dgi @ ps[f"{prefix}.Wi"].T
    dh = dh + dgh @ ps[f"{prefix}.Wh"].T
    return dh, dx


def gru_step(params, state, inp, prefix: str = "gru"):
    state = np.atleast_2d(np.asarray(state, dtype=params.dtype))
    inp = np.atleast_2d(np.asarray(inp, dtype=params.dtype))
    return gru_forward(params, prefix, state, inp, keep_cache=False)[0]


# ---------------------------------------------------------------- attentive propagation

def gat_init(ps: ParamStore, prefix: str, H: int, Hf: int, Hg: int, rng):
    ps.add(f"{prefix}.f.W1", glorot(rng, H, Hf))
    ps.add(f"{prefix}.f.b1", np.zeros(Hf))
    ps.add(f"{prefix}.f.W2", glorot(rng, Hf, H))
    ps.add(f"{prefix}.f.b2", np.zeros(H))
    ps.add(f"{prefix}.g.W1", glorot(rng, H + 1, Hg))
    ps.add(f"{prefix}.g.b1", np.zeros(Hg))
    ps.add(f"{prefix}.g.w2", glorot(rng, Hg, 1))
    ps.add(f"{prefix}.g.b2", np.zeros(1))
    gru_init(ps, f"{prefix}.gru", H, H, rng)


def gat_forward(ps, prefix, E, dst, src, B, keep_cache: bool = True):
    """One propagation round over directed pairs (dst <- src).

    m = f(E_dst - E_src), a = sigmoid(g([E,B]_dst - [E,B]_src)),
    E'_i = GRU(E_i, sum_k a_ik m_ik). Both f and g are two-layer MLPs; the
    first affine layer is applied per node and differenced per edge, the
    second layer of f is applied after aggregation (it is affine).
    """
    n = E.shape[0]
    fW1, fb1, fW2, fb2 = (ps[f"{prefix}.f.{k}"] for k in ("W1", "b1", "W2", "b2"))
    gW1, gb1, gw2, gb2 = (ps[f"{prefix}.g.{k}"] for k in ("W1", "b1", "w2", "b2"))
    Et = np.concatenate([E, B[:, None].astype(E.dtype)], axis=1)
    P = E @ fW1
    Q = Et @ gW1
    u = P[dst] - P[src] + fb1
    hu, su = silu(u)
    v = Q[dst] - Q[src] + gb1
    hv, sv = silu(v)
    a = expit((hv @ gw2)[:, 0] + gb2[0])
    S = scatter_add_rows(hu * a[:, None], dst, n)
    asum = scatter_add_rows(a[:, None], dst, n)[:, 0]
    agg = S @ fW2 + asum[:, None] * fb2
    out, gcache = gru_forward(ps, f"{prefix}.gru", E, agg, keep_cache)
    cache = (E, Et, dst, src, u, hu, su, v, hv, sv, a, S, asum, gcache) if keep_cache else None
    return out, cache


def gat_backward(ps, prefix, cache, dout, grads):
    E, Et, dst, src, u, hu, su, v, hv, sv, a, S, asum, gcache = cache
    n, H = E.shape
    fW1, fW2, fb2 = ps[f"{prefix}.f.W1"], ps[f"{prefix}.f.W2"], ps[f"{prefix}.f.b2"]
    gW1, gw2 = ps[f"{prefix}.g.W1"], ps[f"{prefix}.g.w2"]
    dE, dagg = gru_backward(ps, f"{prefix}.gru", gcache, dout, grads)
    _acc(grads, f"{prefix}.f.W2", S.T @ dagg)
    _acc(grads, f"{prefix}.f.b2", (asum[:, None] * dagg).sum(0))
    dS = dagg @ fW2.T
    dasum = dagg @ fb2
    dah = dS[dst]
    da = dasum[dst] + (dah * hu).sum(1)
    du = dah * a[:, None] * dsilu(u, su)
    _acc(grads, f"{prefix}.f.b1", du.sum(0))
    idx = np.concatenate([dst, src])
    dP = scatter_add_rows(np.concatenate([du, -du]), idx, n)
    _acc(grads, f"{prefix}.f.W1", E.T @ dP)
    dE = dE + dP @ fW1.T
    ds = da * a * (1 - a)
    _acc(grads, f"{prefix}.g.b2", np.array([ds.sum()], dtype=E.dtype))
    _acc(grads, f"{prefix}.g.w2", hv.T @ ds[:, None])
    dv = (ds[:, None] * gw2[:, 0]) * dsilu(v, sv)
    _acc(grads, f"{prefix}.g.b1", dv.sum(0))
    dQ = scatter_add_rows(np.concatenate([dv, -dv]), idx, n)
    _acc(grads, f"{prefix}.g.W1", Et.T @ dQ)
    dE = dE + (dQ @ gW1.T)[:, :H]
    return dE


def adjacency_pairs(adj):
    """Directed (dst, src) arrays for a symmetric boolean adjacency."""
    A = np.asarray(adj, dtype=bool)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValueError("asymmetric adjacency")
    dst, src = np.nonzero(A)
    return dst.astype(np.int64), src.astype(np.int64)


def gat_propagate(params, E, adjacency, B, prefix: str = "gat"):
    """One propagation round on a dense adjacency; forward only."""
    E = np.asarray(E, dtype=params.dtype)
    B = np.asarray(B, dtype=bool)
    if E.shape[0] != len(B) or E.shape[0] != np.shape(adjacency)[0]:
        raise ValueError(f"E has {E.shape[0]} rows but adjacency/mask describe "
                         f"{np.shape(adjacency)[0]}/{len(B)} nodes")
    dst, src = adjacency_pairs(adjacency)
    return gat_forward(params, prefix, E, dst, src, B, keep_cache=False)[0]
