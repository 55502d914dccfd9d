"""In-memory lane-map representations: plain graph, hierarchical graph, stroke sequence.

Coordinates are absolute meters everywhere in this module. Normalization to
[-1, 1] lives in :mod:`lanegraph.preprocess` and is always invertible.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

COORD_EQ_TOL = 1e-9
MERGE_TOL = 1e-6

Edge = tuple[int, int]


class ValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid map: " + "; ".join(self.violations))


@dataclass(frozen=True, eq=False)
class PlainGraph:
    """Undirected spatial graph of every control point.

    ``light`` carries the traffic-light flag per edge (parallel to ``edges``).
    """

    nodes: np.ndarray
    edges: np.ndarray
    light: np.ndarray | None = None
    fov_m: float | None = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 2)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        light = (np.zeros(len(edges), dtype=bool) if self.light is None
                 else np.asarray(self.light, dtype=bool).reshape(-1))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "light", light)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        if self.n_nodes == 0:
            return (0.0, 0.0, 0.0, 0.0)
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        if self.n_edges:
            np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def adjacency_lists(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges.tolist():
            nbrs[a].append(b)
            nbrs[b].append(a)
        return nbrs

    def to_networkx(self):
        import networkx as nx

        G = nx.Graph()
        G.add_nodes_from(range(self.n_nodes))
        G.add_edges_from(map(tuple, self.edges.tolist()))
        return G


@dataclass(frozen=True, eq=False)
class HierGraph:
    """Global key-point graph plus a padded local path per global edge.

    Local-path keys are ``(a, b)`` with ``a`` generated before ``b`` under
    ``order``; coordinates run from ``a`` towards ``b``.
    """

    global_nodes: np.ndarray
    global_adj: np.ndarray
    local_paths: dict[Edge, tuple[np.ndarray, np.ndarray]]
    semantics: dict[Edge, bool]
    W: int
    order: np.ndarray
    fov_m: float | None = None

    def __post_init__(self):
        nodes = np.asarray(self.global_nodes, dtype=np.float64).reshape(-1, 2)
        adj = np.asarray(self.global_adj, dtype=bool).reshape(len(nodes), len(nodes))
        order = np.asarray(self.order, dtype=np.int64).reshape(-1)
        paths = {}
        for key, (coords, mask) in self.local_paths.items():
            paths[(int(key[0]), int(key[1]))] = (
                np.asarray(coords, dtype=np.float64).reshape(-1, 2),
                np.asarray(mask, dtype=bool).reshape(-1),
            )
        sem = {(int(k[0]), int(k[1])): bool(v) for k, v in self.semantics.items()}
        object.__setattr__(self, "global_nodes", nodes)
        object.__setattr__(self, "global_adj", adj)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "local_paths", paths)
        object.__setattr__(self, "semantics", sem)
        object.__setattr__(self, "W", int(self.W))

    @property
    def n_nodes(self) -> int:
        return len(self.global_nodes)

    def rank(self) -> np.ndarray:
        """Position of each node in the generation order."""
        r = np.empty(len(self.order), dtype=np.int64)
        r[self.order] = np.arange(len(self.order))
        return r

    def edge_list(self) -> list[Edge]:
        """Global edges oriented lower-ordered endpoint first, sorted."""
        rank = self.rank() if len(self.order) == self.n_nodes else np.arange(self.n_nodes)
        iu, ju = np.nonzero(np.triu(self.global_adj, 1))
        out = []
        for i, j in zip(iu.tolist(), ju.tolist()):
            out.append((i, j) if rank[i] < rank[j] else (j, i))
        return sorted(out)

    def valid_count(self, key: Edge) -> int:
        if key not in self.local_paths:
            return 0
        return int(self.local_paths[key][1].sum())


@dataclass(frozen=True, eq=False)
class SequenceRep:
    """Stroke sequence: per-step offsets and a pen state in {1, 2, 3}.

    State semantics follow the point *after* the step: 2 means the next step
    draws a segment from here, 1 means the next step lifts the pen and starts
    a new lane, 3 ends the map.
    """

    deltas: np.ndarray
    states: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "deltas", np.asarray(self.deltas, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(2))

    def __len__(self):
        return len(self.states)

    @property
    def steps(self) -> list[tuple[float, float, int]]:
        return [(float(d[0]), float(d[1]), int(q)) for d, q in zip(self.deltas, self.states)]


# ---------------------------------------------------------------- validation

def _validate_plain(g: PlainGraph) -> list[str]:
    out = []
    n = g.n_nodes
    if not np.all(np.isfinite(g.nodes)):
        out.append("non-finite coordinate")
    if len(g.light) != g.n_edges:
        out.append("light flags length mismatch")
    if g.n_edges:
        e = g.edges
        if np.any(e < 0) or np.any(e >= n):
            out.append("edge index out of range")
        if np.any(e[:, 0] == e[:, 1]):
            out.append("self-loop")
        key = np.sort(e, axis=1)
        if len(np.unique(key, axis=0)) != len(key):
            out.append("duplicate edge")
    if n > 1 and np.all(np.isfinite(g.nodes)):
        pairs = cKDTree(g.nodes).query_pairs(COORD_EQ_TOL)
        if pairs:
            out.append("duplicate coordinates")
    return out


def _validate_hier(h: HierGraph) -> list[str]:
    out = []
    n = h.n_nodes
    A = h.global_adj
    if not np.all(np.isfinite(h.global_nodes)):
        out.append("non-finite coordinate")
    if A.shape != (n, n):
        out.append("adjacency shape mismatch")
        return out
    if not np.array_equal(A, A.T):
        out.append("asymmetric adjacency")
    if np.any(np.diag(A)):
        out.append("self-loop")
    order_ok = len(h.order) == n and np.array_equal(np.sort(h.order), np.arange(n))
    if not order_ok:
        out.append("order is not a permutation")
    rank = h.rank() if order_ok else np.arange(n)
    for key in sorted(set(h.local_paths) | set(h.semantics)):
        a, b = key
        if not (0 <= a < n and 0 <= b < n) or not A[a, b]:
            out.append(f"key {a}-{b} not a global edge")
            continue
        if rank[a] > rank[b]:
            out.append(f"key {a}-{b} runs against generation order")
    for key, (coords, mask) in sorted(h.local_paths.items()):
        if coords.shape != (h.W, 2) or mask.shape != (h.W,):
            out.append(f"local path {key[0]}-{key[1]} has wrong width")
            continue
        k = int(mask.sum())
        if not np.all(mask[:k]) or np.any(mask[k:]):
            out.append(f"non-prefix mask on {key[0]}-{key[1]}")
        if not np.all(np.isfinite(coords[mask])):
            out.append(f"non-finite local coordinate on {key[0]}-{key[1]}")
    return out


def validate(graph: PlainGraph | HierGraph) -> list[str]:
    """Return the list of violated invariants; empty means valid."""
    if isinstance(graph, HierGraph):
        return _validate_hier(graph)
    return _validate_plain(graph)


def check(graph):
    violations = validate(graph)
    if violations:
        raise ValidationError(violations)
    return graph


# ---------------------------------------------------------------- flatten

def merge_coincident(nodes: np.ndarray, edges: np.ndarray, light: np.ndarray | None = None,
                     tol: float = MERGE_TOL, fov_m=None) -> PlainGraph:
    """Merge nodes closer than ``tol``; drop resulting self-loops and duplicate edges.

    Surviving nodes keep their first-seen position; the lowest index of each
    cluster is the representative.
    """
    nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 2)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    light = np.zeros(len(edges), bool) if light is None else np.asarray(light, bool)
    n = len(nodes)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n > 1:
        for i, j in sorted(cKDTree(nodes).query_pairs(tol)):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    keep = np.unique(roots)
    remap = np.full(n, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    new_idx = remap[roots]
    out_edges: dict[Edge, bool] = {}
    for (a, b), fl in zip(edges.tolist(), light.tolist()):
        a2, b2 = int(new_idx[a]), int(new_idx[b])
        if a2 == b2:
            continue
        k = (min(a2, b2), max(a2, b2))
        out_edges[k] = out_edges.get(k, False) or bool(fl)
    keys = list(out_edges)
    return PlainGraph(nodes[keep], np.array(keys, dtype=np.int64).reshape(-1, 2),
                      np.array([out_edges[k] for k in keys], dtype=bool), fov_m=fov_m)


def flatten(h: HierGraph, tol: float = MERGE_TOL) -> PlainGraph:
    """Expand every global edge into its chain of valid local points."""
    check(h)
    nodes = [h.global_nodes]
    edges = []
    light = []
    nxt = h.n_nodes
    for a, b in h.edge_list():
        pts = np.zeros((0, 2))
        if (a, b) in h.local_paths:
            coords, mask = h.local_paths[(a, b)]
            pts = coords[mask]
        fl = h.semantics.get((a, b), False)
        chain = [a] + list(range(nxt, nxt + len(pts))) + [b]
        nxt += len(pts)
        nodes.append(pts)
        for u, v in zip(chain[:-1], chain[1:]):
            edges.append((u, v))
            light.append(fl)
    return merge_coincident(np.concatenate(nodes), np.array(edges, dtype=np.int64).reshape(-1, 2),
                            np.array(light, dtype=bool), tol=tol, fov_m=h.fov_m)


# ---------------------------------------------------------------- sequences

def _node_key(nodes, i):
    return (float(nodes[i, 0]), float(nodes[i, 1]), i)


def decompose_paths(g: PlainGraph) -> list[list[int]]:
    """Cover every edge exactly once with maximal simple paths.

    Walks start at odd-degree nodes when any remain, continue along the
    straightest unused edge, and stop on a dead end or on returning to a node
    already on the path. Isolated nodes become single-node paths. Open paths
    are oriented from their lexicographically smaller endpoint and the result
    is sorted by start point (x, y, index).
    """
    nodes = g.nodes
    nbrs = g.adjacency_lists()
    unused = [set(ns) for ns in nbrs]
    remaining = [len(s) for s in unused]
    paths: list[list[int]] = []
    order = sorted(range(g.n_nodes), key=lambda i: _node_key(nodes, i))

    def pick_start():
        first_any = None
        for i in order:
            if remaining[i]:
                if remaining[i] % 2 == 1:
                    return i
                if first_any is None:
                    first_any = i
        return first_any

    while True:
        start = pick_start()
        if start is None:
            break
        path = [start]
        on_path = {start}
        cur = start
        while unused[cur]:
            cands = sorted(unused[cur], key=lambda j: _node_key(nodes, j))
            if len(path) >= 2:
                d0 = nodes[cur] - nodes[path[-2]]
                a0 = math.atan2(d0[1], d0[0])

                def turn(j):
                    d1 = nodes[j] - nodes[cur]
                    t = abs(math.atan2(d1[1], d1[0]) - a0) % (2 * math.pi)
                    return min(t, 2 * math.pi - t)

                cands.sort(key=lambda j: (turn(j),) + _node_key(nodes, j))
            nxt = cands[0]
            unused[cur].discard(nxt)
            unused[nxt].discard(cur)
            remaining[cur] -= 1
            remaining[nxt] -= 1
            path.append(nxt)
            cur = nxt
            if nxt in on_path:
                break
            on_path.add(nxt)
        if path[0] != path[-1] and _node_key(nodes, path[-1]) < _node_key(nodes, path[0]):
            path.reverse()
        paths.append(path)

    deg = g.degrees()
    for i in order:
        if deg[i] == 0:
            paths.append([i])
    paths.sort(key=lambda p: _node_key(nodes, p[0]))
    return paths


def to_sequence(g: PlainGraph, origin_rule="first") -> SequenceRep:
    """Encode a plain graph as a stroke sequence.

    ``origin_rule`` is ``"first"`` (origin is the start of the first stroke) or
    an explicit 2D point, in which case the first step jumps from it to the
    first stroke.
    """
    if g.n_nodes == 0:
        raise ValueError("empty map")
    paths = decompose_paths(g)
    nodes = g.nodes
    deltas = []
    states = []
    if isinstance(origin_rule, str):
        if origin_rule != "first":
            raise ValueError(f"unknown origin rule {origin_rule!r}")
        origin = nodes[paths[0][0]].copy()
        pos = origin.copy()
        first_jump = False
    else:
        origin = np.asarray(origin_rule, dtype=np.float64).reshape(2)
        pos = origin.copy()
        first_jump = True

    for k, path in enumerate(paths):
        last_path = k == len(paths) - 1
        if k > 0 or first_jump:
            deltas.append(nodes[path[0]] - pos)
            pos = nodes[path[0]]
            states.append(2 if len(path) > 1 else (3 if last_path else 1))
        elif len(path) == 1:
            # lone point as the first stroke: a zero step carries its pen-up state
            deltas.append(np.zeros(2))
            states.append(3 if last_path else 1)
        for j in range(1, len(path)):
            deltas.append(nodes[path[j]] - pos)
            pos = nodes[path[j]]
            if j < len(path) - 1:
                states.append(2)
            else:
                states.append(3 if last_path else 1)
    return SequenceRep(np.array(deltas).reshape(-1, 2), np.array(states, dtype=np.int64), origin)


def sequence_points(seq: SequenceRep) -> np.ndarray:
    return seq.origin + np.cumsum(seq.deltas, axis=0) if len(seq) else np.zeros((0, 2))


def sequence_to_plain(seq: SequenceRep, origin_drawn: bool = True, tol: float = MERGE_TOL,
                      fov_m=None) -> PlainGraph:
    """Rebuild a plain graph from a stroke sequence.

    ``origin_drawn`` says whether the first step draws from the origin (the
    ``"first"`` origin rule) or jumps from it.
    """
    pts = sequence_points(seq)
    nodes = [seq.origin] if origin_drawn else []
    edges = []
    prev_state = 2 if origin_drawn else 1
    prev_idx = 0 if origin_drawn else -1
    for k in range(len(seq)):
        d = seq.deltas[k]
        q = int(seq.states[k])
        if k == 0 and origin_drawn and not np.any(d) and q != 2:
            # zero step encoding a lone first point
            prev_state, prev_idx = q, 0
            if q == 3:
                break
            continue
        idx = len(nodes)
        nodes.append(pts[k])
        if prev_state == 2 and prev_idx >= 0:
            edges.append((prev_idx, idx))
        prev_state, prev_idx = q, idx
        if q == 3:
            break
    return merge_coincident(np.array(nodes).reshape(-1, 2), np.array(edges, dtype=np.int64).reshape(-1, 2),
                            tol=tol, fov_m=fov_m)


# ---------------------------------------------------------------- json io

def _lanes_for(g: PlainGraph) -> list[dict]:
    """Group edges into lanes: maximal chains through degree-2 nodes."""
    deg = g.degrees()
    nbrs = g.adjacency_lists()
    flag = {}
    for (a, b), fl in zip(g.edges.tolist(), g.light.tolist()):
        flag[(min(a, b), max(a, b))] = fl
    seen = set()
    lanes = []

    def walk(a, b):
        path = [a, b]
        seen.add((min(a, b), max(a, b)))
        while deg[path[-1]] == 2 and path[-1] != path[0]:
            cur = path[-1]
            nxt = [v for v in nbrs[cur] if (min(cur, v), max(cur, v)) not in seen]
            if not nxt:
                break
            seen.add((min(cur, nxt[0]), max(cur, nxt[0])))
            path.append(nxt[0])
        return path

    for a in range(g.n_nodes):
        if deg[a] == 2:
            continue
        for b in sorted(nbrs[a]):
            if (min(a, b), max(a, b)) not in seen:
                lanes.append(walk(a, b))
    for a in range(g.n_nodes):
        for b in sorted(nbrs[a]):
            if (min(a, b), max(a, b)) not in seen:
                lanes.append(walk(a, b))
    out = []
    for p in lanes:
        fl = any(flag[(min(u, v), max(u, v))] for u, v in zip(p[:-1], p[1:]))
        out.append({"path": [int(i) for i in p], "traffic_light": bool(fl)})
    return out


def plain_to_dict(g: PlainGraph) -> dict:
    return {
        "fov_m": g.fov_m,
        "nodes": g.nodes.tolist(),
        "edges": g.edges.tolist(),
        "lanes": _lanes_for(g),
    }


def hier_to_dict(h: HierGraph) -> dict:
    d = plain_to_dict(flatten(h))
    keys = h.edge_list()
    d.update({
        "global_nodes": h.global_nodes.tolist(),
        "global_adj": [list(k) for k in keys],
        "local_paths": {
            f"{a}-{b}": {
                "coords": h.local_paths[(a, b)][0].tolist(),
                "mask": h.local_paths[(a, b)][1].astype(int).tolist(),
            }
            for a, b in keys if (a, b) in h.local_paths
        },
        "semantics": {f"{a}-{b}": bool(h.semantics[(a, b)]) for a, b in keys if (a, b) in h.semantics},
        "W": h.W,
        "order": h.order.tolist(),
    })
    return d


def plain_from_dict(d: dict) -> PlainGraph:
    nodes = np.asarray(d.get("nodes", []), dtype=np.float64).reshape(-1, 2)
    edges = np.asarray(d.get("edges", []), dtype=np.int64).reshape(-1, 2)
    light = np.zeros(len(edges), dtype=bool)
    if d.get("lanes"):
        pos = {(min(a, b), max(a, b)): k for k, (a, b) in enumerate(edges.tolist())}
        for lane in d["lanes"]:
            if not lane.get("traffic_light"):
                continue
            p = lane["path"]
            for u, v in zip(p[:-1], p[1:]):
                k = pos.get((min(u, v), max(u, v)))
                if k is not None:
                    light[k] = True
    return PlainGraph(nodes, edges, light, fov_m=d.get("fov_m"))


def _parse_key(s: str) -> Edge:
    a, b = s.split("-")
    return int(a), int(b)


def hier_from_dict(d: dict) -> HierGraph:
    nodes = np.asarray(d["global_nodes"], dtype=np.float64).reshape(-1, 2)
    n = len(nodes)
    adj = np.zeros((n, n), dtype=bool)
    for a, b in d.get("global_adj", []):
        adj[a, b] = adj[b, a] = True
    W = int(d["W"])
    paths = {_parse_key(k): (np.asarray(v["coords"], dtype=np.float64).reshape(-1, 2),
                             np.asarray(v["mask"], dtype=bool))
             for k, v in d.get("local_paths", {}).items()}
    sem = {_parse_key(k): bool(v) for k, v in d.get("semantics", {}).items()}
    order = d.get("order", list(range(n)))
    return HierGraph(nodes, adj, paths, sem, W, order, fov_m=d.get("fov_m"))


def dumps(graph: PlainGraph | HierGraph) -> str:
    d = hier_to_dict(graph) if isinstance(graph, HierGraph) else plain_to_dict(graph)
    return json.dumps(d, separators=(",", ":"))


def loads(text: str) -> PlainGraph | HierGraph:
    d = json.loads(text)
    if "global_nodes" in d:
        return hier_from_dict(d)
    return plain_from_dict(d)


def save(graph, path) -> None:
    Path(path).write_text(dumps(graph), encoding="utf-8")


def load(path) -> PlainGraph | HierGraph:
    return loads(Path(path).read_text(encoding="utf-8"))


def load_plain(path) -> PlainGraph:
    """Load any map file as a plain graph (hierarchical files are flattened)."""
    g = load(path)
    return flatten(g) if isinstance(g, HierGraph) else g
