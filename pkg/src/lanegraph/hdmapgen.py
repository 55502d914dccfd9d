"""Hierarchical map generator.

Global graph: nodes are emitted one at a time in DFS order. Each step encodes
the generated prefix plus the node under construction with stacked attentive
propagation layers, then draws the new node's coordinate from a 2D GMM head
and its connections to earlier nodes from a Bernoulli-mixture head. The
variant decides the dependency between the two draws:

* ``coordinate_first``: C_t, then re-encode with C_t injected, then L_t.
* ``topology_first``: L_t, then re-encode with L_t injected, then C_t.
* ``independent``: both from one encoding.

Local paths are decoded in one shot per global edge; a separate head gives a
traffic-light probability per edge.

All coordinates inside the model are normalized to [-1, 1]^2 over the patch.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from . import map_model as mm
from ._kernels import scatter_add_rows
from .nn import (Adam, BernMixParams, GmmParams2D, ParamStore, bernmix_from_raw, bernmix_logprob,
                 bernmix_nll_raw, bernmix_sample, gat_backward, gat_forward, gat_init, gmm_from_raw, gmm_nll,
                 gmm_nll_raw, gmm_sample, load_checkpoint, mlp_backward, mlp_forward, mlp_init, save_checkpoint)
from .nn.params import glorot
from .preprocess import dfs_order, fov_transform

VARIANTS = ("coordinate_first", "topology_first", "independent")
PARAM_VERSION = "hdmapgen-1"
MIN_EDGE_LEN = 1e-3


@dataclass
class ModelConfig:
    variant: str = "coordinate_first"
    hidden: int = 128
    layers: int = 7
    rounds: int = 1
    K: int = 20
    Kb: int = 20
    max_nodes: int = 64
    W: int = 8
    local: bool = True
    fov_m: float = 200.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rounds < 1 or self.layers < 1:
            raise ValueError("rounds and layers must be >= 1")


@dataclass
class TrainConfig:
    variant: str = "coordinate_first"
    rounds: int = 1
    layers: int = 7
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    lambda_coord: float = 1.0
    lambda_topo: float = 1.0
    lambda_local: float = 1.0
    lambda_mask: float = 1.0
    lambda_sem: float = 1.0
    hidden: int = 128
    K: int = 20
    Kb: int = 20
    steps_per_map: int | None = None
    val_every: int = 1
    dtype: str = "float32"
    max_nodes: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rounds < 1 or self.layers < 1:
            raise ValueError("rounds and layers must be >= 1")
        for k in ("lambda_coord", "lambda_topo", "lambda_local", "lambda_mask", "lambda_sem"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lambdas(self):
        return (self.lambda_coord, self.lambda_topo, self.lambda_local, self.lambda_mask, self.lambda_sem)


@dataclass
class GlobalStep:
    t: int
    C: np.ndarray
    L: np.ndarray
    coord_nll: float
    topo_nll: float


@dataclass
class LocalDecodeOut:
    coords: np.ndarray  # (W, 2) normalized
    mask: np.ndarray  # (W,) probabilities
    light: float

    def valid_length(self) -> int:
        return prefix_length(self.mask)


def prefix_length(probs) -> int:
    """Threshold at 0.5 and truncate at the first miss."""
    on = np.asarray(probs) >= 0.5
    return int(np.argmin(on)) if not on.all() else len(on)


class Model:
    """Parameters plus the config and corpus facts needed to sample."""

    def __init__(self, cfg: ModelConfig, params: ParamStore, meta: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.meta = meta or {}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32, meta=None) -> "Model":
        rng = np.random.default_rng(seed)
        ps = ParamStore(dtype, seed=seed, version=PARAM_VERSION)
        H = cfg.hidden
        ps.add("enc.WL", glorot(rng, cfg.max_nodes, H))
        ps.add("enc.WC", glorot(rng, 2, H))
        ps.add("enc.b", np.zeros(H))
        ps.add("enc.start", rng.normal(0, 0.1, H))
        for l in range(cfg.layers):
            gat_init(ps, f"gnn.{l}", H, H, max(8, H // 2), rng)
        mlp_init(ps, "coord", [H, H, 5 * cfg.K], rng)
        mlp_init(ps, "alpha", [H, H, cfg.Kb], rng)
        mlp_init(ps, "theta", [H, H, cfg.Kb], rng)
        if cfg.local:
            mlp_init(ps, "local", [2 * H + 4, 2 * H, 2 * H, 3 * cfg.W], rng)
            mlp_init(ps, "sem", [2 * H + 4, H, 1], rng)
        return cls(cfg, ps, meta)

    def save(self, path, optimizer=None, rng=None, extra: dict | None = None):
        meta = {"model": asdict(self.cfg), **self.meta, **(extra or {})}
        save_checkpoint(path, self.params, meta, optimizer, rng)

    @classmethod
    def load(cls, path):
        params, meta, opt, rng = load_checkpoint(path)
        meta = dict(meta)
        cfg = ModelConfig(**meta.pop("model"))
        m = cls(cfg, params, meta)
        return m, opt, rng


# ---------------------------------------------------------------- examples

@dataclass
class Example:
    """One map in generation order, normalized coordinates."""

    C: np.ndarray  # (N, 2)
    A: np.ndarray  # (N, N) bool
    edges: np.ndarray  # (E, 2) generation indices (s, t), s < t
    local_xy: np.ndarray  # (E, W, 2) edge-frame targets
    local_mask: np.ndarray  # (E, W) bool
    sem: np.ndarray  # (E,) bool

    @property
    def N(self):
        return len(self.C)


def edge_frame(Cs, Ct):
    """Origin, unit axis s->t, unit normal and length for an edge (vectorized over rows)."""
    d = Ct - Cs
    L = np.maximum(np.hypot(d[..., 0], d[..., 1]), MIN_EDGE_LEN)
    u = d / L[..., None]
    n = np.stack([-u[..., 1], u[..., 0]], -1)
    return u, n, L


def to_edge_frame(P, Cs, Ct):
    u, n, L = edge_frame(Cs, Ct)
    rel = P - Cs[:, None, :]
    return np.stack([(rel * u[:, None]).sum(-1), (rel * n[:, None]).sum(-1)], -1) / L[:, None, None]


def from_edge_frame(Q, Cs, Ct):
    u, n, L = edge_frame(Cs, Ct)
    return Cs[:, None, :] + L[:, None, None] * (Q[..., :1] * u[:, None] + Q[..., 1:] * n[:, None])


def example_from_hier(h_norm: mm.HierGraph) -> Example:
    order = h_norm.order
    rank = h_norm.rank()
    C = h_norm.global_nodes[order]
    A = h_norm.global_adj[np.ix_(order, order)]
    W = h_norm.W
    keys = h_norm.edge_list()
    edges = np.array([(rank[a], rank[b]) for a, b in keys], dtype=np.int64).reshape(-1, 2)
    xy = np.zeros((len(keys), W, 2))
    mask = np.zeros((len(keys), W), dtype=bool)
    sem = np.zeros(len(keys), dtype=bool)
    for i, k in enumerate(keys):
        if k in h_norm.local_paths:
            c, m = h_norm.local_paths[k]
            xy[i] = np.where(m[:, None], c, 0.0)
            mask[i] = m
        sem[i] = h_norm.semantics.get(k, False)
    if len(keys):
        xy = to_edge_frame(xy, C[edges[:, 0]], C[edges[:, 1]])
        xy[~mask] = 0.0
    return Example(C, A, edges, xy, mask, sem)


def example_from_plain(g_norm: mm.PlainGraph, seed: int) -> Example:
    """Plain graph as a 'global-only' map: every control point is a node."""
    n = g_norm.n_nodes
    adj = np.zeros((n, n), dtype=bool)
    if g_norm.n_edges:
        adj[g_norm.edges[:, 0], g_norm.edges[:, 1]] = True
        adj[g_norm.edges[:, 1], g_norm.edges[:, 0]] = True
    order = dfs_order(adj, seed=seed)
    C = g_norm.nodes[order]
    A = adj[np.ix_(order, order)]
    iu, ju = np.nonzero(np.triu(A, 1))
    edges = np.stack([iu, ju], 1).astype(np.int64).reshape(-1, 2)
    return Example(C, A, edges, np.zeros((len(edges), 0, 2)), np.zeros((len(edges), 0), bool),
                   np.zeros(len(edges), bool))


def normalize_hier(h: mm.HierGraph, fov_m: float) -> mm.HierGraph:
    from .preprocess import normalize
    return normalize(h, fov_m, tol=1e-6)[0]


# ---------------------------------------------------------------- batched graph construction

class _GraphBatch:
    """Block-diagonal union of step graphs (prefix + node under construction)."""

    def __init__(self, M: int):
        self.M = M
        self.XL, self.XC, self.isnew, self.dst, self.src = [], [], [], [], []
        self.n = 0

    def add(self, C, A, L_inj=None, C_inj=None) -> int:
        t = len(C)
        if t + 1 > self.M:
            raise ValueError(f"step graph with {t + 1} nodes exceeds the max-node budget {self.M}")
        off = self.n
        XL = np.zeros((t + 1, self.M))
        XL[:t, :t] = A
        XC = np.zeros((t + 1, 2))
        XC[:t] = C
        if L_inj is not None:
            XL[t, :t] = L_inj
        if C_inj is not None:
            XC[t] = C_inj
        nw = np.zeros(t + 1, dtype=bool)
        nw[t] = True
        iu, ju = np.nonzero(A)
        prev = np.arange(t)
        self.dst += [off + iu, off + t + 0 * prev, off + prev]
        self.src += [off + ju, off + prev, off + t + 0 * prev]
        self.XL.append(XL)
        self.XC.append(XC)
        self.isnew.append(nw)
        self.n += t + 1
        return off

    def finish(self, dtype):
        self.XL = np.concatenate(self.XL).astype(dtype)
        self.XC = np.concatenate(self.XC).astype(dtype)
        self.isnew = np.concatenate(self.isnew)
        self.dst = np.concatenate(self.dst).astype(np.int64)
        self.src = np.concatenate(self.src).astype(np.int64)
        return self


def encode(ps, cfg: ModelConfig, batch: _GraphBatch, keep_cache=True):
    E = batch.XL @ ps["enc.WL"] + batch.XC @ ps["enc.WC"] + ps["enc.b"]
    E[batch.isnew] += ps["enc.start"]
    caches = []
    for l in range(cfg.layers):
        for _ in range(cfg.rounds):
            E, c = gat_forward(ps, f"gnn.{l}", E, batch.dst, batch.src, batch.isnew, keep_cache)
            caches.append((l, c))
    return E, caches


def encode_backward(ps, cfg, batch, caches, dE, grads):
    for l, c in reversed(caches):
        dE = gat_backward(ps, f"gnn.{l}", c, dE, grads)
    _acc(grads, "enc.WL", batch.XL.T @ dE)
    _acc(grads, "enc.WC", batch.XC.T @ dE)
    _acc(grads, "enc.b", dE.sum(0))
    _acc(grads, "enc.start", dE[batch.isnew].sum(0))


def _acc(grads, name, v):
    if name in grads:
        grads[name] += v
    else:
        grads[name] = v.copy()


def encode_context(model: Model, C_prefix, A_prefix, L_inj=None, C_inj=None) -> np.ndarray:
    """States for prefix nodes 0..t-1 plus the node under construction (last row)."""
    dt = model.params.dtype
    b = _GraphBatch(model.cfg.max_nodes)
    b.add(np.asarray(C_prefix, float).reshape(-1, 2), np.asarray(A_prefix, bool), L_inj, C_inj)
    return encode(model.params, model.cfg, b.finish(dt), keep_cache=False)[0]


# ---------------------------------------------------------------- teacher-forced plan

@dataclass
class _Plan:
    batch: _GraphBatch
    n_maps: int
    coord_node: np.ndarray
    coord_target: np.ndarray
    coord_w: np.ndarray
    topo_node: np.ndarray
    topo_w: np.ndarray
    pair_new: np.ndarray
    pair_prev: np.ndarray
    pair_seg: np.ndarray
    pair_target: np.ndarray
    loc_new: np.ndarray
    loc_prev: np.ndarray
    loc_C: np.ndarray  # (n, 4) [C_t, C_s]
    loc_xy: np.ndarray
    loc_mask: np.ndarray
    loc_sem: np.ndarray
    loc_w: np.ndarray  # (n, 3) weights for mse, mask, sem
    stop_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    stop_batch: _GraphBatch | None = None
    stop_new: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def build_plan(cfg: ModelConfig, examples, steps=None, lambdas=(1, 1, 1, 1, 1), dtype=np.float32) -> _Plan:
    """Teacher-forced batch over ``examples``; ``steps[i]`` selects steps of map i (default all).

    Step t in 0..N builds node t from the true prefix; t = N is the stop step
    whose true adjacency row is all zero.
    """
    lc, lt, ll, lm, ls = lambdas
    b = _GraphBatch(cfg.max_nodes)
    sb = _GraphBatch(cfg.max_nodes)
    n_maps = len(examples)
    co_n, co_t, co_w = [], [], []
    tp_n, tp_w = [], []
    pr_n, pr_p, pr_s, pr_t = [], [], [], []
    lo_n, lo_p, lo_C, lo_xy, lo_m, lo_s, lo_w = [], [], [], [], [], [], []
    stop_rows, stop_new = [], []
    n_topo_steps = 0
    var = cfg.variant
    for i, ex in enumerate(examples):
        N = ex.N
        sel = np.arange(N + 1) if steps is None else np.asarray(steps[i])
        n_coord = int(np.sum(sel < N))
        n_topo = int(np.sum(sel >= 1))
        sel_set = set(sel.tolist())
        e_rows = [r for r in range(len(ex.edges)) if int(ex.edges[r, 1]) in sel_set]
        n_e = len(e_rows)
        n_valid = int(ex.local_mask[e_rows].sum()) if n_e else 0
        by_t = {}
        for r in e_rows:
            by_t.setdefault(int(ex.edges[r, 1]), []).append(r)
        for t in sel.tolist():
            C, A = ex.C[:t], ex.A[:t, :t]
            Lrow = ex.A[t, :t] if t < N else np.zeros(t, dtype=bool)
            Ct = ex.C[t] if t < N else None
            plain_node = cond_node = None
            if var == "independent":
                plain_node = cond_node = b.add(C, A) + t
            elif var == "coordinate_first":
                if t < N:
                    plain_node = b.add(C, A) + t
                if t >= 1:
                    cond_node = b.add(C, A, C_inj=Ct) + t
                    if t == N:
                        stop_rows.append(cond_node)
                        stop_new.append(sb.add(C, A) + t)
            else:
                if t >= 1:
                    plain_node = b.add(C, A) + t
                if t < N:
                    cond_node = b.add(C, A, L_inj=Lrow) + t if t >= 1 else b.add(C, A) + t
            coord_node = plain_node if var == "coordinate_first" else cond_node
            topo_node = cond_node if var == "coordinate_first" else plain_node
            if t < N:
                co_n.append(coord_node)
                co_t.append(ex.C[t])
                co_w.append(lc / (n_coord * n_maps))
            if t >= 1:
                seg = len(tp_n)
                tp_n.append(topo_node)
                tp_w.append(lt / (n_topo * n_maps))
                off = topo_node - t
                pr_n += [topo_node] * t
                pr_p += list(range(off, off + t))
                pr_s += [seg] * t
                pr_t += Lrow.tolist()
                n_topo_steps += 1
            if cfg.local and t < N and by_t.get(t):
                off = cond_node - t
                for r in by_t.get(t, []):
                    s = int(ex.edges[r, 0])
                    lo_n.append(cond_node)
                    lo_p.append(off + s)
                    lo_C.append(np.concatenate([ex.C[t], ex.C[s]]))
                    lo_xy.append(ex.local_xy[r])
                    lo_m.append(ex.local_mask[r])
                    lo_s.append(ex.sem[r])
                    lo_w.append((ll / (max(1, n_valid) * n_maps), lm / (n_e * cfg.W * n_maps),
                                 ls / (n_e * n_maps)))
    W = cfg.W
    i64 = lambda x: np.asarray(x, dtype=np.int64)
    return _Plan(
        batch=b.finish(dtype), n_maps=n_maps,
        coord_node=i64(co_n), coord_target=np.asarray(co_t, dtype).reshape(-1, 2), coord_w=np.asarray(co_w, dtype),
        topo_node=i64(tp_n), topo_w=np.asarray(tp_w, dtype),
        pair_new=i64(pr_n), pair_prev=i64(pr_p), pair_seg=i64(pr_s), pair_target=np.asarray(pr_t, bool),
        loc_new=i64(lo_n), loc_prev=i64(lo_p), loc_C=np.asarray(lo_C, dtype).reshape(-1, 4),
        loc_xy=np.asarray(lo_xy, dtype).reshape(len(lo_xy), W, 2),
        loc_mask=np.asarray(lo_m, bool).reshape(len(lo_m), W),
        loc_sem=np.asarray(lo_s, bool), loc_w=np.asarray(lo_w, dtype).reshape(-1, 3),
        stop_rows=i64(stop_rows), stop_batch=sb.finish(dtype) if stop_rows else None, stop_new=i64(stop_new),
    )


def _greedy_coords(raw, K):
    logits, mu = raw[:, :K], raw[:, K:3 * K].reshape(-1, K, 2)
    return mu[np.arange(len(raw)), np.argmax(logits, axis=1)]


def refresh_stop_coords(ps, cfg: ModelConfig, plan: _Plan):
    """coordinate_first stop steps inject the model's own greedy coordinate.

    The sampler injects whatever coordinate it just drew before deciding to
    stop, so training shows the stop row next to a model-drawn coordinate
    rather than a made-up one. The injection is a constant for the gradient.
    """
    if plan.stop_batch is None:
        return
    Es, _ = encode(ps, cfg, plan.stop_batch, keep_cache=False)
    raw, _ = mlp_forward(ps, "coord", Es[plan.stop_new], keep_cache=False)
    plan.batch.XC[plan.stop_rows] = _greedy_coords(raw, cfg.K)


def plan_loss(ps, cfg: ModelConfig, plan: _Plan, want_grad=True):
    """Weighted teacher-forced loss, its gradient, and unweighted component sums.

    The batch is held fixed; call :func:`refresh_stop_coords` first for
    coordinate_first plans.
    """
    b = plan.batch
    E, enc_cache = encode(ps, cfg, b, keep_cache=want_grad)
    grads = {} if want_grad else None
    dE = np.zeros_like(E) if want_grad else None
    loss = 0.0
    stats = {}
    K = cfg.K
    if len(plan.coord_node):
        raw, mc = mlp_forward(ps, "coord", E[plan.coord_node], want_grad)
        nll, draw = gmm_nll_raw(raw, plan.coord_target, K)
        loss += float((plan.coord_w * nll).sum())
        stats["coord_nll"] = (float(nll.sum()), len(nll))
        if want_grad:
            dX = mlp_backward(ps, "coord", mc, draw * plan.coord_w[:, None], grads)
            dE += scatter_add_rows(dX, plan.coord_node, len(E))
    if len(plan.topo_node):
        al, ca = mlp_forward(ps, "alpha", E[plan.topo_node], want_grad)
        D = E[plan.pair_new] - E[plan.pair_prev]
        tl, ct = mlp_forward(ps, "theta", D, want_grad)
        nll, dal, dtl = bernmix_nll_raw(al, tl, plan.pair_target, plan.pair_seg)
        loss += float((plan.topo_w * nll).sum())
        stats["topo_nll"] = (float(nll.sum()), len(nll))
        stats["topo_bce"] = (float(nll.sum()), max(1, len(plan.pair_seg)))
        if want_grad:
            dXa = mlp_backward(ps, "alpha", ca, dal * plan.topo_w[:, None], grads)
            dD = mlp_backward(ps, "theta", ct, dtl * plan.topo_w[plan.pair_seg][:, None], grads)
            dE += scatter_add_rows(np.concatenate([dXa, dD, -dD]),
                                   np.concatenate([plan.topo_node, plan.pair_new, plan.pair_prev]), len(E))
    if cfg.local and len(plan.loc_new):
        W = cfg.W
        X = np.concatenate([E[plan.loc_new], E[plan.loc_prev], plan.loc_C], axis=1)
        out, cl = mlp_forward(ps, "local", X, want_grad)
        pred = out[:, :2 * W].reshape(-1, W, 2)
        mlog = out[:, 2 * W:]
        m = plan.loc_mask
        err = (pred - plan.loc_xy) * m[:, :, None]
        se = (err * err).sum((1, 2))
        y = m.astype(out.dtype)
        bce = (np.logaddexp(0, mlog) - y * mlog).sum(1)
        sl, cs = mlp_forward(ps, "sem", X, want_grad)
        sl = sl[:, 0]
        ys = plan.loc_sem.astype(out.dtype)
        sbce = np.logaddexp(0, sl) - ys * sl
        w = plan.loc_w
        loss += float((w[:, 0] * se).sum() + (w[:, 1] * bce).sum() + (w[:, 2] * sbce).sum())
        stats["local_mse"] = (float(se.sum()), max(1, int(m.sum())))
        stats["mask_bce"] = (float(bce.sum()), m.size)
        stats["sem_bce"] = (float(sbce.sum()), len(sbce))
        if want_grad:
            dout = np.concatenate([(2 * err * w[:, 0, None, None]).reshape(len(X), -1),
                                   (expit(mlog) - y) * w[:, 1, None]], axis=1)
            dX = mlp_backward(ps, "local", cl, dout, grads)
            dX += mlp_backward(ps, "sem", cs, ((expit(sl) - ys) * w[:, 2])[:, None], grads)
            H = cfg.hidden
            dE += scatter_add_rows(np.concatenate([dX[:, :H], dX[:, H:2 * H]]),
                                   np.concatenate([plan.loc_new, plan.loc_prev]), len(E))
    if want_grad:
        encode_backward(ps, cfg, b, enc_cache, dE, grads)
        for k in ps.names():
            if k not in grads:
                grads[k] = np.zeros_like(ps[k])
    return loss, grads, stats


def teacher_forced_loss(model: Model, examples, lambdas=(1, 1, 1, 1, 1), steps=None):
    """Loss and gradient of the weighted objective on a fixed batch."""
    plan = build_plan(model.cfg, examples, steps, lambdas, model.params.dtype)
    refresh_stop_coords(model.params, model.cfg, plan)
    loss, grads, _ = plan_loss(model.params, model.cfg, plan)
    return loss, grads


# ---------------------------------------------------------------- training

def _merge_stats(acc, stats):
    for k, (s, n) in stats.items():
        a = acc.setdefault(k, [0.0, 0])
        a[0] += s
        a[1] += n


def _finish_stats(acc):
    return {k: s / max(1, n) for k, (s, n) in acc.items()}


def evaluate(model: Model, examples, lambdas=(1, 1, 1, 1, 1), batch_size=32) -> dict:
    """Teacher-forced metrics over all steps: per-step coord NLL, per-entry topology BCE, ..."""
    acc = {}
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        plan = build_plan(model.cfg, chunk, None, lambdas, model.params.dtype)
        refresh_stop_coords(model.params, model.cfg, plan)
        loss, _, st = plan_loss(model.params, model.cfg, plan, want_grad=False)
        total += loss * len(chunk)
        _merge_stats(acc, st)
    out = _finish_stats(acc)
    out["loss"] = total / max(1, len(examples))
    return out


def corpus_facts(examples) -> dict:
    sizes = [int(ex.N) for ex in examples]
    return {"sizes": sizes}


def train(dataset, cfg: TrainConfig, val=None, report=None, fov_m: float | None = None, W: int | None = None,
          local: bool = True, examples=None, init_model: Model | None = None, log=None):
    """Teacher-forced training. ``dataset`` holds HierGraphs in patch-frame meters.

    ``report`` may be a path or a file object receiving one JSON line per epoch.
    Returns (model, history).
    """
    if examples is None:
        if not dataset:
            raise ValueError("empty dataset")
        Ws = {h.W for h in dataset}
        if len(Ws) != 1:
            raise ValueError(f"inconsistent W across dataset: {sorted(Ws)}")
        fov_m = fov_m or dataset[0].fov_m or 200.0
        W = Ws.pop()
        examples = [example_from_hier(normalize_hier(h, fov_m)) for h in dataset]
        val_ex = [example_from_hier(normalize_hier(h, fov_m)) for h in (val or [])]
    else:
        val_ex = val or []
    if not examples:
        raise ValueError("empty dataset")
    dtype = np.dtype(cfg.dtype)
    max_n = max(ex.N for ex in examples)
    M = cfg.max_nodes or int(np.ceil(1.25 * max_n)) + 1
    if init_model is not None:
        model = init_model
    else:
        mcfg = ModelConfig(cfg.variant, cfg.hidden, cfg.layers, cfg.rounds, cfg.K, cfg.Kb, M, W or 0, local,
                           fov_m or 200.0)
        model = Model.init(mcfg, cfg.seed, dtype, meta=corpus_facts(examples))
    mcfg = model.cfg
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    lam = cfg.lambdas()
    plan_cache: dict = {}
    history = []
    fh = open(report, "w") if isinstance(report, (str, Path)) else report
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(len(examples))
            acc = {}
            tot = 0.0
            for bi in range(0, len(perm), cfg.batch_size):
                idx = perm[bi:bi + cfg.batch_size]
                chunk = [examples[i] for i in idx]
                if cfg.steps_per_map is None and len(perm) <= cfg.batch_size:
                    # full-batch training sees the same plan every epoch
                    if "all" not in plan_cache:
                        plan_cache["all"] = build_plan(mcfg, [examples[i] for i in sorted(idx)], None, lam, dtype)
                    plan = plan_cache["all"]
                elif cfg.steps_per_map is None:
                    plan = build_plan(mcfg, chunk, None, lam, dtype)
                else:
                    steps = [np.sort(rng.choice(ex.N + 1, size=min(ex.N + 1, cfg.steps_per_map), replace=False))
                             for ex in chunk]
                    plan = build_plan(mcfg, chunk, steps, lam, dtype)
                refresh_stop_coords(model.params, mcfg, plan)
                loss, grads, st = plan_loss(model.params, mcfg, plan)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                opt.step(model.params, grads)
                tot += loss * len(idx)
                _merge_stats(acc, st)
            rec = {"epoch": epoch, "loss": tot / len(examples), **{f"train_{k}": v for k, v in
                                                                   _finish_stats(acc).items()}}
            if val_ex and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
                rec.update({f"val_{k}": v for k, v in evaluate(model, val_ex, lam).items()})
            history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if log is not None:
                log(rec)
    finally:
        if fh is not None and fh is not report:
            fh.close()
    model.meta.setdefault("kind", "hdmapgen")
    model.meta.setdefault("sizes", corpus_facts(examples)["sizes"])
    model.meta["train"] = asdict(cfg)
    model.meta["adam_t"] = opt.t
    model._optimizer = opt
    return model, history


# ---------------------------------------------------------------- heads at sampling time

def coord_head(model: Model, e_t) -> GmmParams2D:
    raw, _ = mlp_forward(model.params, "coord", np.atleast_2d(e_t), keep_cache=False)
    return gmm_from_raw(raw[0], model.cfg.K)


def topo_head(model: Model, E, t) -> BernMixParams:
    ps = model.params
    al, _ = mlp_forward(ps, "alpha", E[t:t + 1], keep_cache=False)
    tl, _ = mlp_forward(ps, "theta", E[t] - E[:t], keep_cache=False)
    return bernmix_from_raw(al[0], tl)


def global_step(model: Model, C_prefix, A_prefix, tau: float, rng, E=None) -> tuple[GlobalStep, np.ndarray]:
    """Draw node t = len(C_prefix). Returns the step and the states used for local decoding."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    var = model.cfg.variant
    if var not in VARIANTS:
        raise ValueError(f"unknown variant {var!r}")
    C_prefix = np.asarray(C_prefix, dtype=np.float64).reshape(-1, 2)
    t = len(C_prefix)
    E = encode_context(model, C_prefix, A_prefix) if E is None else E
    coord_nll = topo_nll = 0.0
    L = np.zeros(t, dtype=bool)
    if var == "independent":
        g = coord_head(model, E[t])
        C = gmm_sample(g, tau, rng)
        coord_nll = gmm_nll(g, C)
        if t:
            bm = topo_head(model, E, t)
            L = bernmix_sample(bm, rng)
            topo_nll = -bernmix_logprob(bm, L)
        E_loc = E
    elif var == "coordinate_first":
        g = coord_head(model, E[t])
        C = gmm_sample(g, tau, rng)
        coord_nll = gmm_nll(g, C)
        E_loc = E
        if t:
            E_loc = encode_context(model, C_prefix, A_prefix, C_inj=C)
            bm = topo_head(model, E_loc, t)
            L = bernmix_sample(bm, rng)
            topo_nll = -bernmix_logprob(bm, L)
    else:
        E_loc = E
        if t:
            bm = topo_head(model, E, t)
            L = bernmix_sample(bm, rng)
            topo_nll = -bernmix_logprob(bm, L)
            if not L.any():
                return GlobalStep(t, np.zeros(2), L, 0.0, topo_nll), E
            E_loc = encode_context(model, C_prefix, A_prefix, L_inj=L)
        g = coord_head(model, E_loc[t])
        C = gmm_sample(g, tau, rng)
        coord_nll = gmm_nll(g, C)
    return GlobalStep(t, np.asarray(C, dtype=np.float64), L, float(coord_nll), float(topo_nll)), E_loc


def _local_inputs(model, E_t, E_s, C_t, C_s):
    E_s = np.atleast_2d(E_s)
    n = len(E_s)
    C4 = np.concatenate([np.broadcast_to(C_t, (n, 2)), np.atleast_2d(C_s)], axis=1)
    return np.concatenate([np.broadcast_to(E_t, (n, len(E_t))), E_s, C4], axis=1).astype(model.params.dtype)


def decode_local(model: Model, E_t, E_s, C_t, C_s) -> list[LocalDecodeOut]:
    """One MLP pass per edge (vectorized over rows of E_s / C_s)."""
    W = model.cfg.W
    X = _local_inputs(model, E_t, E_s, C_t, C_s)
    out, _ = mlp_forward(model.params, "local", X, keep_cache=False)
    Q = out[:, :2 * W].reshape(-1, W, 2).astype(np.float64)
    mprob = expit(out[:, 2 * W:].astype(np.float64))
    Cs = np.atleast_2d(C_s).astype(np.float64)
    Ct = np.broadcast_to(np.asarray(C_t, dtype=np.float64), Cs.shape)
    P = from_edge_frame(Q, Cs, Ct)
    light = decode_semantic(model, E_t, E_s, C_t, C_s)
    return [LocalDecodeOut(P[i], mprob[i], float(light[i])) for i in range(len(X))]


def decode_semantic(model: Model, E_t, E_s, C_t, C_s) -> np.ndarray:
    X = _local_inputs(model, E_t, E_s, C_t, C_s)
    out, _ = mlp_forward(model.params, "sem", X, keep_cache=False)
    return expit(out[:, 0].astype(np.float64))


def sample_global(model: Model, tau: float, max_nodes: int, rng):
    """Global graph only: normalized coords, adjacency and the steps taken."""
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    max_nodes = min(int(max_nodes), model.cfg.max_nodes - 1)
    C = np.zeros((0, 2))
    A = np.zeros((0, 0), dtype=bool)
    steps = []
    loc_states = []
    for t in range(max_nodes):
        step, E_loc = global_step(model, C, A, tau, rng)
        if t >= 1 and not step.L.any():
            steps.append(step)
            break
        steps.append(step)
        C = np.vstack([C, step.C])
        A2 = np.zeros((t + 1, t + 1), dtype=bool)
        A2[:t, :t] = A
        A2[t, :t] = step.L
        A2[:t, t] = step.L
        A = A2
        loc_states.append((E_loc[t].copy(), E_loc[:t][step.L].copy()))
    return C, A, steps, loc_states


def sample(model: Model, tau: float = 0.2, max_nodes: int | None = None, rng=None, return_info=False):
    """Draw one map; returned HierGraph is in patch-frame meters and passes validate."""
    rng = np.random.default_rng(0) if rng is None else rng
    if max_nodes is None:
        sizes = model.meta.get("sizes") or [model.cfg.max_nodes - 1]
        max_nodes = int(rng.choice(sizes))
    C, A, steps, loc_states = sample_global(model, tau, max_nodes, rng)
    n = len(C)
    W = model.cfg.W
    paths, sem = {}, {}
    if model.cfg.local:
        for t in range(n):
            prev = np.nonzero(A[t, :t])[0]
            if not len(prev):
                continue
            e_t, E_s = loc_states[t]
            outs = decode_local(model, e_t, E_s, C[t], C[prev])
            for s, o in zip(prev.tolist(), outs):
                k = o.valid_length()
                mask = np.zeros(W, dtype=bool)
                mask[:k] = True
                # local path runs from the earlier node s towards t
                coords = np.where(mask[:, None], o.coords, 0.0)
                paths[(s, t)] = (coords, mask)
                sem[(s, t)] = bool(rng.random() < o.light)
    h = mm.HierGraph(C, A, paths, sem, W, np.arange(n), fov_m=model.cfg.fov_m)
    tr = fov_transform(model.cfg.fov_m)
    from .preprocess import denormalize
    out = mm.check(denormalize(h, tr, fov_m=model.cfg.fov_m))
    if return_info:
        return out, {"n_nodes": n, "hit_cap": n >= max_nodes, "degenerate": n <= 1, "steps": len(steps)}
    return out
