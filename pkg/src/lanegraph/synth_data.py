"""Procedural lane maps: jittered street grid, gentle arcs, twin-lane roads, turn lanes."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import map_model as mm
from .preprocess import PatchConfig, PatchStats, preprocess_map


@dataclass(frozen=True)
class CityConfig:
    size_m: float = 1000.0
    block_m: float = 120.0
    jitter: float = 0.12
    curve_prob: float = 0.8
    light_prob: float = 0.5
    seed: int = 0
    drop_prob: float = 0.1
    parallel_prob: float = 0.15
    turn_prob: float = 0.5
    sample_m: float = 15.0
    arc_spacing_m: float = 3.0

    def __post_init__(self):
        if self.size_m < 2 * self.block_m:
            raise ValueError("size_m must be at least 2 * block_m")
        for name in ("curve_prob", "light_prob", "drop_prob", "parallel_prob", "turn_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")


@dataclass
class City:
    graph: mm.PlainGraph
    intersections: np.ndarray  # plain node index of every grid vertex
    signalized: np.ndarray  # bool per grid vertex
    config: CityConfig


LANE_HALF_WIDTH = 1.75
TAPER_M = 15.0
TURN_RADIUS = (8.0, 12.0)
TURN_SEGMENTS = 8
LIGHT_ZONE_M = 30.0
SURVEY_NOISE_M = 0.02
ARC_SAGITTA = (0.02, 0.045)


class _Builder:
    def __init__(self):
        self.nodes: list[np.ndarray] = []
        self.edges: list[tuple[int, int]] = []
        self.light: list[bool] = []

    def node(self, p) -> int:
        self.nodes.append(np.asarray(p, dtype=np.float64))
        return len(self.nodes) - 1

    def chain(self, ids, light_fn=None):
        for a, b in zip(ids[:-1], ids[1:]):
            self.edges.append((a, b))
            self.light.append(bool(light_fn(a, b)) if light_fn else False)


def _straight(a, b, spacing, rng):
    L = float(np.hypot(*(b - a)))
    k = max(1, int(round(L / spacing)))
    t = np.linspace(0.0, 1.0, k + 1)
    pts = a + t[:, None] * (b - a)
    if k > 1:
        n = np.array([-(b - a)[1], (b - a)[0]]) / L
        pts[1:-1] += rng.normal(0.0, SURVEY_NOISE_M, size=(k - 1, 1)) * n
    return pts


def _arc(a, b, spacing, rng):
    """Circular arc a->b with a small random sagitta."""
    d = b - a
    L = float(np.hypot(*d))
    h = rng.uniform(*ARC_SAGITTA) * L * rng.choice([-1.0, 1.0])
    n = np.array([-d[1], d[0]]) / L
    # circle through a, b and the sagitta point
    R = (L * L / 4 + h * h) / (2 * abs(h))
    half = np.arcsin(min(1.0, L / (2 * R)))
    k = max(2, int(round(2 * half * R / spacing)))
    ang = np.linspace(-half, half, k + 1)
    center = (a + b) / 2 - np.sign(h) * n * (R - abs(h))
    u = d / L
    pts = center + R * (np.cos(ang)[:, None] * n * np.sign(h) + np.sin(ang)[:, None] * u)
    pts[0], pts[-1] = a, b
    return pts


def _twin(a, b, spacing, side):
    """One lane of a twin road: offset by a lane half-width with tapered ends."""
    d = b - a
    L = float(np.hypot(*d))
    n = np.array([-d[1], d[0]]) / L
    taper = min(TAPER_M, L / 3)
    s = np.concatenate([[0.0, taper], np.arange(taper + spacing, L - taper, spacing), [L - taper, L]])
    s = np.unique(np.clip(s, 0, L))
    off = np.minimum(1.0, np.minimum(s, L - s) / taper) * LANE_HALF_WIDTH * side
    return a + (s / L)[:, None] * d + off[:, None] * n


def _bezier(p0, p1, p2, k):
    t = np.linspace(0.0, 1.0, k + 1)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def generate_city(cfg: CityConfig) -> City:
    """Deterministic synthetic city for ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    m = int(round(cfg.size_m / cfg.block_m)) + 1
    sp = cfg.size_m / (m - 1)
    V = np.stack(np.meshgrid(np.arange(m) * sp, np.arange(m) * sp, indexing="ij"), -1).astype(np.float64)
    V += rng.uniform(-1, 1, size=V.shape) * cfg.jitter * sp
    V = np.clip(V, 0.0, cfg.size_m)
    # boundary vertices stay on the boundary
    V[0, :, 0] = 0.0
    V[-1, :, 0] = cfg.size_m
    V[:, 0, 1] = 0.0
    V[:, -1, 1] = cfg.size_m

    segs = []
    for i in range(m):
        for j in range(m):
            if i + 1 < m:
                segs.append(((i, j), (i + 1, j)))
            if j + 1 < m:
                segs.append(((i, j), (i, j + 1)))
    deg = {(i, j): 0 for i in range(m) for j in range(m)}
    for a, b in segs:
        deg[a] += 1
        deg[b] += 1
    kept = []
    for a, b in segs:
        if rng.random() < cfg.drop_prob and deg[a] > 2 and deg[b] > 2:
            deg[a] -= 1
            deg[b] -= 1
            continue
        kept.append((a, b))

    signal = rng.random((m, m)) < cfg.light_prob
    B = _Builder()
    vid = {(i, j): B.node(V[i, j]) for i in range(m) for j in range(m)}

    def lit_near(p, q, v):
        if not signal[v]:
            return False
        c = V[v]
        return min(np.hypot(*(p - c)), np.hypot(*(q - c))) <= LIGHT_ZONE_M

    # geometry per kept segment; single-lane roads keep their polyline for turn lanes
    single: dict[tuple, list[int]] = {}
    for a, b in kept:
        pa, pb = V[a], V[b]
        r = rng.random()
        if r < cfg.parallel_prob:
            for side in (-1.0, 1.0):
                pts = _twin(pa, pb, cfg.sample_m, side)
                ids = [vid[a]] + [B.node(p) for p in pts[1:-1]] + [vid[b]]
                B.chain(ids, lambda x, y: lit_near(B.nodes[x], B.nodes[y], a) or lit_near(B.nodes[x], B.nodes[y], b))
            continue
        if r < cfg.parallel_prob + (1 - cfg.parallel_prob) * cfg.curve_prob:
            pts = _arc(pa, pb, cfg.arc_spacing_m, rng)
        else:
            pts = _straight(pa, pb, cfg.sample_m, rng)
        ids = [vid[a]] + [B.node(p) for p in pts[1:-1]] + [vid[b]]
        single[(a, b)] = ids
        B.chain(ids, lambda x, y: lit_near(B.nodes[x], B.nodes[y], a) or lit_near(B.nodes[x], B.nodes[y], b))

    # turn lanes: join a point on one approach to a point on a perpendicular one
    by_vertex: dict[tuple, list] = {}
    for (a, b), ids in single.items():
        by_vertex.setdefault(a, []).append(ids)
        by_vertex.setdefault(b, []).append(ids[::-1])
    for v in sorted(by_vertex):
        arms = by_vertex[v]
        for x in range(len(arms)):
            for y in range(x + 1, len(arms)):
                A_, C_ = arms[x], arms[y]
                da = np.asarray(B.nodes[A_[-1]]) - np.asarray(B.nodes[A_[0]])
                dc = np.asarray(B.nodes[C_[-1]]) - np.asarray(B.nodes[C_[0]])
                cosang = abs(da @ dc) / (np.hypot(*da) * np.hypot(*dc))
                if cosang > 0.5 or rng.random() >= cfg.turn_prob:
                    continue
                radius = rng.uniform(*TURN_RADIUS)
                pa = _node_at(B, A_, radius)
                pc = _node_at(B, C_, radius)
                if pa is None or pc is None:
                    continue
                pts = _bezier(np.asarray(B.nodes[pa]), np.asarray(B.nodes[vid[v]]), np.asarray(B.nodes[pc]),
                              TURN_SEGMENTS)
                ids = [pa] + [B.node(p) for p in pts[1:-1]] + [pc]
                B.chain(ids, lambda *_: bool(signal[v]))

    g = mm.merge_coincident(np.array(B.nodes), np.array(B.edges, dtype=np.int64), np.array(B.light, bool),
                            fov_m=None)
    inter = np.array([vid[(i, j)] for i in range(m) for j in range(m)], dtype=np.int64)
    return City(g, inter, signal.reshape(-1), cfg)


def _node_at(B: _Builder, ids: list[int], dist: float):
    """Interior node of the polyline nearest to arc length ``dist`` from ``ids[0]``."""
    if len(ids) < 3:
        return None
    P = np.array([B.nodes[i] for i in ids])
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(P, axis=0).T))])
    k = int(np.argmin(np.abs(s[1:-1] - dist))) + 1
    if s[k] > 2.5 * dist:
        return None
    return ids[k]


def city_seed(seed: int, k: int) -> int:
    return int(np.random.default_rng([seed, k]).integers(2**31))


def split_of(key: str, val_fraction: float = 0.1) -> str:
    """Stable train/val assignment from a hash of the patch key."""
    h = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big") / 2**64
    return "val" if h < val_fraction else "train"


def corpus(cfg: CityConfig, n_cities: int, patch_cfg: PatchConfig, n_patches: int, out_dir,
           val_fraction: float = 0.1) -> dict:
    """Cities -> patches -> hierarchical graphs written under ``out_dir/{train,val}``."""
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "val").mkdir(parents=True, exist_ok=True)
    (out / "cities").mkdir(parents=True, exist_ok=True)
    stats = PatchStats()
    splits = {"train": [], "val": []}
    for k in range(n_cities):
        ccfg = CityConfig(**{**asdict(cfg), "seed": city_seed(cfg.seed, k)})
        city = generate_city(ccfg)
        mm.save(city.graph, out / "cities" / f"city_{k:03d}.json")
        pcfg = PatchConfig(patch_cfg.fov_m, patch_cfg.max_local_W, patch_cfg.curvature_tol,
                           seed=city_seed(patch_cfg.seed, k))
        items, _ = preprocess_map(city.graph, pcfg, n_patches, stats)
        for j, (idx, raw, dec, h) in enumerate(items):
            name = f"patch_{k:03d}_{j:05d}"
            split = split_of(f"{k}:{j}", val_fraction)
            mm.save(h, out / split / f"{name}.json")
            splits[split].append(name)
    summary = stats.summary()
    summary["splits"] = {s: len(v) for s, v in splits.items()}
    summary["city_config"] = asdict(cfg)
    summary["patch_config"] = asdict(patch_cfg)
    (out / "stats.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
