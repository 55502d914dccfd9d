"""Raw vector map -> training-ready hierarchical graphs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .map_model import HierGraph, PlainGraph, check, merge_coincident

# Calibrated so the synthetic corpus loses ~70% of its control points (see
# tests/test_acceptance.py::test_roundtrip_fidelity).
DEFAULT_CURVATURE_TOL = 0.04

DEFAULT_W = {200.0: 8, 120.0: 20}


def default_w(fov_m: float) -> int:
    return DEFAULT_W.get(float(fov_m), 8)


@dataclass(frozen=True)
class PatchConfig:
    fov_m: float = 200.0
    max_local_W: int = 8
    curvature_tol: float = DEFAULT_CURVATURE_TOL
    seed: int = 0

    def __post_init__(self):
        if not self.fov_m > 0:
            raise ValueError("fov_m must be positive")
        if self.max_local_W < 1:
            raise ValueError("max_local_W must be >= 1")
        if not 0 <= self.curvature_tol < math.pi:
            raise ValueError("curvature_tol must lie in [0, pi)")


class LocalOverflow(ValueError):
    pass


class MultiEdge(ValueError):
    pass


# ---------------------------------------------------------------- decimation

def _point_segment_dist(p, a, b):
    ab = b - a
    den = float(ab @ ab)
    t = 0.0 if den == 0 else float(np.clip((p - a) @ ab / den, 0.0, 1.0))
    return float(np.hypot(*(a + t * ab - p)))


def _directed_hausdorff(P, Q):
    worst = 0.0
    for p in P:
        d = min(_point_segment_dist(p, Q[i], Q[i + 1]) for i in range(len(Q) - 1)) if len(Q) > 1 \
            else float(np.hypot(*(p - Q[0])))
        worst = max(worst, d)
    return worst


def polyline_hausdorff(P, Q) -> float:
    """Vertex-to-polyline Hausdorff distance, symmetric."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    return max(_directed_hausdorff(P, Q), _directed_hausdorff(Q, P))


def decimate(polyline, curvature_tol: float = DEFAULT_CURVATURE_TOL, return_error: bool = False):
    """Drop interior control points whose turning angle is below ``curvature_tol``.

    Points are removed flattest-first and angles are re-measured against the
    surviving neighbours, so every retained interior point turns by at least
    the tolerance and the operation is idempotent. Endpoints always survive.
    With ``return_error`` the Hausdorff distance to the input is returned too.
    """
    P = np.asarray(polyline, dtype=np.float64).reshape(-1, 2)
    if len(P) < 2:
        raise ValueError("degenerate polyline")
    out = P[_kernels.decimate_keep(P, curvature_tol)]
    if return_error:
        return out, polyline_hausdorff(P, out)
    return out


# ---------------------------------------------------------------- key points and chains

def extract_keypoints(g: PlainGraph) -> set[int]:
    """Nodes of degree != 2, plus the smallest node of every pure degree-2 cycle."""
    deg = g.degrees()
    keys = {int(i) for i in np.nonzero(deg != 2)[0]}
    nbrs = g.adjacency_lists()
    seen = set(keys)
    for start in range(g.n_nodes):
        if start in seen:
            continue
        # walk the degree-2 component containing start
        comp = [start]
        seen.add(start)
        stack = [start]
        touches_key = False
        while stack:
            u = stack.pop()
            for v in nbrs[u]:
                if v in keys:
                    touches_key = True
                elif v not in seen:
                    seen.add(v)
                    comp.append(v)
                    stack.append(v)
        if not touches_key:
            keys.add(min(comp, key=lambda i: (g.nodes[i, 0], g.nodes[i, 1], i)))
    return keys


def trace_chains(g: PlainGraph, keys: set[int]) -> list[list[int]]:
    """Split g into chains key -> interior degree-2 nodes -> key."""
    nbrs = g.adjacency_lists()
    used = set()
    chains = []
    for k in sorted(keys):
        for v in sorted(nbrs[k]):
            e = (min(k, v), max(k, v))
            if e in used:
                continue
            used.add(e)
            chain = [k, v]
            while chain[-1] not in keys:
                u = chain[-1]
                nxt = [w for w in nbrs[u] if (min(u, w), max(u, w)) not in used]
                if not nxt:
                    break
                w = nxt[0]
                used.add((min(u, w), max(u, w)))
                chain.append(w)
            chains.append(chain)
    return chains


def _edge_light(g: PlainGraph) -> dict:
    return {(min(a, b), max(a, b)): bool(f) for (a, b), f in zip(g.edges.tolist(), g.light.tolist())}


def _chain_light(g: PlainGraph, chain, light) -> bool:
    """A lane is signal-controlled when at least half of its length carries the flag."""
    seg = np.hypot(*np.diff(g.nodes[chain], axis=0).T)
    fl = np.array([light[(min(a, b), max(a, b))] for a, b in zip(chain[:-1], chain[1:])])
    total = seg.sum()
    return bool(fl.any()) if total == 0 else bool(seg[fl].sum() >= 0.5 * total)


def decimate_graph(g: PlainGraph, curvature_tol: float = DEFAULT_CURVATURE_TOL) -> PlainGraph:
    """Decimate every key-point-to-key-point chain; key points are never removed."""
    keys = extract_keypoints(g)
    light = _edge_light(g)
    keep = np.zeros(g.n_nodes, dtype=bool)
    keep[list(keys)] = True
    new_edges = {}
    for chain in trace_chains(g, keys):
        pts = g.nodes[chain]
        mask = _kernels.decimate_keep(pts, curvature_tol)
        kept = [c for c, m in zip(chain, mask) if m]
        keep[kept] = True
        fl = _chain_light(g, chain, light)
        # a lane's flag spreads over the segments that replace it
        for a, b in zip(kept[:-1], kept[1:]):
            new_edges[(min(a, b), max(a, b))] = fl or new_edges.get((min(a, b), max(a, b)), False)
    remap = np.full(g.n_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    keys_sorted = sorted(new_edges)
    edges = np.array([(remap[a], remap[b]) for a, b in keys_sorted], dtype=np.int64).reshape(-1, 2)
    return PlainGraph(g.nodes[keep], edges, np.array([new_edges[k] for k in keys_sorted], bool),
                      fov_m=g.fov_m)


def _resolve_chains(g: PlainGraph, keys: set[int], multi_edge: str):
    """Promote interior points until chains form a simple graph over key points."""
    keys = set(keys)
    while True:
        chains = trace_chains(g, keys)
        groups: dict[tuple[int, int], list[list[int]]] = {}
        for c in chains:
            groups.setdefault((min(c[0], c[-1]), max(c[0], c[-1])), []).append(c)
        promote = []
        for (a, b), cs in sorted(groups.items()):
            if a == b:
                for c in cs:
                    promote.append(c[len(c) // 2])
            elif len(cs) > 1:
                if multi_edge == "error":
                    raise MultiEdge(f"multi-edge between key points {a} and {b}")
                cs = sorted(cs, key=lambda c: (len(c), c[1:-1]))
                for c in cs[1:]:
                    promote.append(c[len(c) // 2])
        if not promote:
            return keys, chains
        keys.update(promote)


# ---------------------------------------------------------------- ordering

def dfs_order(adj, seed=None, start: int | None = None) -> np.ndarray:
    """Depth-first generation order.

    The start node is drawn uniformly from ``seed`` unless given. Neighbours
    are visited in ascending index order; remaining components start from
    their smallest unvisited node.
    """
    A = np.asarray(adj, dtype=bool)
    n = len(A)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    nbrs = [np.nonzero(A[i])[0].tolist() for i in range(n)]
    visited = np.zeros(n, dtype=bool)
    order = []

    def run(root):
        visited[root] = True
        order.append(root)
        stack = [iter(nbrs[root])]
        while stack:
            for v in stack[-1]:
                if not visited[v]:
                    visited[v] = True
                    order.append(v)
                    stack.append(iter(nbrs[v]))
                    break
            else:
                stack.pop()

    run(start)
    for i in range(n):
        if not visited[i]:
            run(i)
    return np.array(order, dtype=np.int64)


# ---------------------------------------------------------------- hierarchy

def build_hierarchical(g: PlainGraph, cfg: PatchConfig, multi_edge: str = "promote",
                       start: int | None = None) -> HierGraph:
    """Global graph over key points; each chain interior becomes a padded local path.

    Global node ``i`` is the ``i``-th key point by plain-graph index. ``order``
    comes from :func:`dfs_order` seeded with ``cfg.seed``.
    """
    check(g)
    keys, chains = _resolve_chains(g, extract_keypoints(g), multi_edge)
    W = cfg.max_local_W
    for c in chains:
        if len(c) - 2 > W:
            raise LocalOverflow(f"local overflow: chain {c[0]}->{c[-1]} has {len(c) - 2} interior "
                                f"points, W={W}")
    key_list = sorted(keys)
    gidx = {k: i for i, k in enumerate(key_list)}
    n = len(key_list)
    adj = np.zeros((n, n), dtype=bool)
    for c in chains:
        a, b = gidx[c[0]], gidx[c[-1]]
        adj[a, b] = adj[b, a] = True
    order = dfs_order(adj, seed=cfg.seed, start=start)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    light = _edge_light(g)
    paths = {}
    sem = {}
    for c in chains:
        a, b = gidx[c[0]], gidx[c[-1]]
        interior = c[1:-1]
        if rank[a] > rank[b]:
            a, b = b, a
            interior = interior[::-1]
        coords = np.zeros((W, 2))
        mask = np.zeros(W, dtype=bool)
        coords[:len(interior)] = g.nodes[interior]
        mask[:len(interior)] = True
        paths[(a, b)] = (coords, mask)
        sem[(a, b)] = _chain_light(g, c, light)
    return HierGraph(g.nodes[key_list], adj, paths, sem, W, order, fov_m=g.fov_m)


# ---------------------------------------------------------------- patches

def _clip_segment(p, q, lo, hi):
    """Liang-Barsky clip of segment p->q to the box [lo, hi]^2; None if outside."""
    t0, t1 = 0.0, 1.0
    d = q - p
    for k in range(2):
        for pk, qk in ((-d[k], p[k] - lo), (d[k], hi - p[k])):
            if pk == 0:
                if qk < 0:
                    return None
                continue
            r = qk / pk
            if pk < 0:
                if r > t1:
                    return None
                t0 = max(t0, r)
            else:
                if r < t0:
                    return None
                t1 = min(t1, r)
    if t0 > t1:
        return None
    return t0, t1


def crop(g: PlainGraph, x0: float, y0: float, fov: float) -> PlainGraph:
    """Square crop with corner (x0, y0); result is in the patch frame [0, fov]^2.

    Edges crossing the boundary are cut there and gain a new endpoint node.
    """
    nodes = g.nodes - np.array([x0, y0])
    inside = np.all((nodes >= 0) & (nodes <= fov), axis=1)
    out_nodes = [nodes[i] for i in range(g.n_nodes) if inside[i]]
    idx = np.full(g.n_nodes, -1, dtype=np.int64)
    idx[inside] = np.arange(int(inside.sum()))
    edges, light = [], []
    for (a, b), fl in zip(g.edges.tolist(), g.light.tolist()):
        if inside[a] and inside[b]:
            edges.append((idx[a], idx[b]))
            light.append(fl)
            continue
        seg = _clip_segment(nodes[a], nodes[b], 0.0, fov)
        if seg is None or seg[1] - seg[0] <= 0:
            continue
        ends = []
        for node, t in ((a, seg[0]), (b, seg[1])):
            if inside[node]:
                ends.append(idx[node])
            else:
                p = np.clip(nodes[a] + t * (nodes[b] - nodes[a]), 0.0, fov)
                out_nodes.append(p)
                ends.append(len(out_nodes) - 1)
        edges.append(tuple(ends))
        light.append(fl)
    merged = merge_coincident(np.array(out_nodes).reshape(-1, 2), np.array(edges, dtype=np.int64).reshape(-1, 2),
                              np.array(light, dtype=bool))
    deg = merged.degrees()
    keep = deg > 0
    if np.all(keep):
        return PlainGraph(merged.nodes, merged.edges, merged.light, fov_m=float(fov))
    remap = np.cumsum(keep) - 1
    return PlainGraph(merged.nodes[keep], remap[merged.edges], merged.light, fov_m=float(fov))


def sample_patches(m: PlainGraph, cfg: PatchConfig, n: int, first_index: int = 0) -> list[PlainGraph]:
    """``n`` random square crops of side ``cfg.fov_m``; patch ``i`` uses rng ``(seed, i)``.

    Empty crops are redrawn; at most ``100 * n`` draws in total.
    """
    x_min, y_min, x_max, y_max = m.bbox
    fov = cfg.fov_m
    if x_max - x_min < fov - 1e-9 or y_max - y_min < fov - 1e-9:
        raise ValueError(f"map ({x_max - x_min:.1f} x {y_max - y_min:.1f} m) smaller than fov {fov} m")
    budget = 100 * n
    out = []
    for i in range(first_index, first_index + n):
        rng = np.random.default_rng([cfg.seed, i])
        while True:
            if budget <= 0:
                raise RuntimeError("sparse map: rejection budget exhausted")
            budget -= 1
            x0 = rng.uniform(x_min, max(x_min, x_max - fov))
            y0 = rng.uniform(y_min, max(y_min, y_max - fov))
            p = crop(m, x0, y0, fov)
            if p.n_edges:
                out.append(p)
                break
    return out


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormTransform:
    """x_norm = x * scale + offset."""

    scale: float
    offset: float

    def forward(self, xy):
        return np.asarray(xy, dtype=np.float64) * self.scale + self.offset

    def inverse(self, xy):
        return (np.asarray(xy, dtype=np.float64) - self.offset) / self.scale

    def to_dict(self):
        return {"scale": self.scale, "offset": self.offset}


def fov_transform(fov_m: float) -> NormTransform:
    return NormTransform(2.0 / fov_m, -1.0)


def _map_hier(h: HierGraph, f, fov_m=None) -> HierGraph:
    paths = {k: (np.where(m[:, None], f(c), 0.0), m) for k, (c, m) in h.local_paths.items()}
    return HierGraph(f(h.global_nodes), h.global_adj, paths, h.semantics, h.W, h.order,
                     fov_m=h.fov_m if fov_m is None else fov_m)


def normalize(h: HierGraph, fov_m: float, tol: float = 1e-9) -> tuple[HierGraph, NormTransform]:
    """Map the fov square [0, fov]^2 onto [-1, 1]^2."""
    pts = [h.global_nodes] + [c[m] for c, m in h.local_paths.values()]
    allp = np.concatenate(pts) if pts else np.zeros((0, 2))
    if len(allp) and (allp.min() < -tol or allp.max() > fov_m + tol):
        raise ValueError("coordinate outside the fov square")
    t = fov_transform(fov_m)
    return _map_hier(h, t.forward), t


def denormalize(h: HierGraph, t: NormTransform, fov_m=None) -> HierGraph:
    return _map_hier(h, t.inverse, fov_m=fov_m)


# ---------------------------------------------------------------- pipeline

@dataclass
class PatchStats:
    plain_nodes: list = field(default_factory=list)
    plain_edges: list = field(default_factory=list)
    decimated_nodes: list = field(default_factory=list)
    global_nodes: list = field(default_factory=list)
    global_edges: list = field(default_factory=list)
    local_valid_max: list = field(default_factory=list)
    rejected_overflow: int = 0

    def add(self, raw: PlainGraph, dec: PlainGraph, h: HierGraph):
        self.plain_nodes.append(raw.n_nodes)
        self.plain_edges.append(raw.n_edges)
        self.decimated_nodes.append(dec.n_nodes)
        self.global_nodes.append(h.n_nodes)
        self.global_edges.append(int(h.global_adj.sum() // 2))
        self.local_valid_max.append(max([int(m.sum()) for _, m in h.local_paths.values()] or [0]))

    def summary(self) -> dict:
        def desc(xs):
            xs = np.asarray(xs, dtype=np.float64)
            if len(xs) == 0:
                return {"max": 0, "mean": 0.0}
            return {"max": int(xs.max()), "mean": float(xs.mean())}

        dec = np.asarray(self.decimated_nodes, float)
        raw = np.asarray(self.plain_nodes, float)
        glob = np.asarray(self.global_nodes, float)
        gn = np.asarray(self.global_nodes, float)
        ge = np.asarray(self.global_edges, float)
        return {
            "n_patches": len(self.plain_nodes),
            "plain_nodes": desc(self.plain_nodes),
            "plain_edges": desc(self.plain_edges),
            "decimated_nodes": desc(self.decimated_nodes),
            "global_nodes": desc(self.global_nodes),
            "global_edges": desc(self.global_edges),
            "local_nodes_max": int(max(self.local_valid_max or [0])),
            "removed_fraction": float(1 - dec.sum() / raw.sum()) if raw.sum() else 0.0,
            "global_share": float(glob.sum() / dec.sum()) if dec.sum() else 0.0,
            "global_no_edge_per_edge": float(np.mean((gn * (gn - 1) / 2 - ge) / np.maximum(ge, 1)))
            if len(gn) else 0.0,
            "rejected_overflow": self.rejected_overflow,
        }


def preprocess_patch(raw: PlainGraph, cfg: PatchConfig, index: int = 0):
    """Decimate then build the hierarchy; the DFS start is seeded by (seed, index)."""
    dec = decimate_graph(raw, cfg.curvature_tol)
    sub = PatchConfig(cfg.fov_m, cfg.max_local_W, cfg.curvature_tol,
                      seed=int(np.random.default_rng([cfg.seed, index, 1]).integers(2**31)))
    return dec, build_hierarchical(dec, sub)


def preprocess_map(m: PlainGraph, cfg: PatchConfig, n: int, stats: PatchStats | None = None):
    """Sample ``n`` patches that fit the local width, yielding (index, raw, decimated, hier).

    Patches whose decimated chains exceed ``cfg.max_local_W`` are skipped and
    the next patch index is drawn instead.
    """
    stats = stats if stats is not None else PatchStats()
    out = []
    idx = 0
    while len(out) < n:
        if idx > 100 * n:
            raise RuntimeError("sparse map: too many overflowing patches")
        raw = sample_patches(m, cfg, 1, first_index=idx)[0]
        try:
            dec, h = preprocess_patch(raw, cfg, idx)
        except LocalOverflow:
            stats.rejected_overflow += 1
            idx += 1
            continue
        stats.add(raw, dec, h)
        out.append((idx, raw, dec, h))
        idx += 1
    return out, stats
