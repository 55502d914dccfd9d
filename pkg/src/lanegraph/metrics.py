"""Fidelity, diversity and latency metrics over sets of plain graphs (meters)."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, shortest_path

from . import map_model as mm
from ._kernels import min_sq_dists, w1_pairwise

SPECTRUM_BINS = 200
REGION_RADIUS_M = 20.0
N_PROBES = 32
CHAMFER_SCALE = 1e4
DEAD_END_MARGIN_FRAC = 0.05


# ---------------------------------------------------------------- topology

def degree_hist(g: mm.PlainGraph) -> np.ndarray:
    """Counts of nodes with degree 0..max."""
    if g.n_nodes == 0:
        raise ValueError("empty graph")
    return np.bincount(g.degrees()).astype(np.float64)


def normalized_laplacian(g: mm.PlainGraph) -> np.ndarray:
    """D^-1/2 (D - A) D^-1/2 with isolated nodes contributing a zero row."""
    n = g.n_nodes
    A = np.zeros((n, n))
    if g.n_edges:
        A[g.edges[:, 0], g.edges[:, 1]] = 1.0
        A[g.edges[:, 1], g.edges[:, 0]] = 1.0
    d = A.sum(1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    return (np.diag(d) - A) * inv[:, None] * inv[None, :]


def laplacian_eigenvalues(g: mm.PlainGraph) -> np.ndarray:
    if g.n_nodes == 0:
        raise ValueError("empty graph")
    ev = np.linalg.eigvalsh(normalized_laplacian(g))
    return np.clip(np.sort(ev), 0.0, 2.0)


def laplacian_spectrum(g: mm.PlainGraph, bins: int = SPECTRUM_BINS) -> np.ndarray:
    """Eigenvalue histogram over [0, 2] with ``bins`` equal bins (counts)."""
    h, _ = np.histogram(laplacian_eigenvalues(g), bins=bins, range=(0.0, 2.0))
    return h.astype(np.float64)


def _stack_hists(hists, length=None):
    length = length or max(len(h) for h in hists)
    out = np.zeros((len(hists), length))
    for i, h in enumerate(hists):
        h = np.asarray(h, dtype=np.float64)
        s = h.sum()
        out[i, :len(h)] = h / s if s > 0 else h
    return out


def w1_matrix(setA, setB, bin_width: float = 1.0) -> np.ndarray:
    """Pairwise first Wasserstein distance between normalized histograms on a shared grid."""
    L = max(max(len(h) for h in setA), max(len(h) for h in setB))
    return w1_pairwise(_stack_hists(setA, L), _stack_hists(setB, L), bin_width)


def median_sigma(ref, bin_width: float = 1.0) -> float:
    """Median heuristic over pairwise W1 distances within the reference set."""
    D = w1_matrix(ref, ref, bin_width)
    off = D[np.triu_indices(len(ref), 1)]
    off = off[off > 0]
    return float(np.median(off)) if len(off) else 1.0


def mmd(setA, setB, sigma: float, bin_width: float = 1.0) -> float:
    """Biased squared MMD with k(p, q) = exp(-W1(p, q)^2 / (2 sigma^2))."""
    if not len(setA) or not len(setB):
        raise ValueError("mmd needs non-empty sets")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = lambda D: np.exp(-D * D / (2 * sigma * sigma))
    kaa = k(w1_matrix(setA, setA, bin_width)).mean()
    kbb = k(w1_matrix(setB, setB, bin_width)).mean()
    kab = k(w1_matrix(setA, setB, bin_width)).mean()
    return float(kaa + kbb - 2 * kab)


# ---------------------------------------------------------------- geometry / urban features

def frechet_normal(a, b) -> float:
    """Squared Frechet distance between 1D normals fitted by moments (population std)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("frechet_normal needs at least 2 samples per side")
    return float((a.mean() - b.mean()) ** 2 + (a.std() - b.std()) ** 2)


@dataclass
class FeatureSample:
    length: float
    orientation: float
    connectivity: float
    density: float
    reach: float
    convenience: float | None
    flags: list = field(default_factory=list)


FEATURES = ("length", "orientation", "connectivity", "density", "reach", "convenience")


def _csr(g: mm.PlainGraph, weighted: bool):
    n = g.n_nodes
    e = g.edges
    if weighted:
        w = np.hypot(*(g.nodes[e[:, 0]] - g.nodes[e[:, 1]]).T) if len(e) else np.zeros(0)
    else:
        w = np.ones(len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return coo_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n)).tocsr()


def lane_lengths(g: mm.PlainGraph) -> np.ndarray:
    """Polyline length of every maximal chain through degree-2 nodes."""
    out = []
    for lane in mm._lanes_for(g):
        p = g.nodes[lane["path"]]
        out.append(float(np.hypot(*np.diff(p, axis=0).T).sum()))
    return np.asarray(out)


def orientation_stat(g: mm.PlainGraph) -> float:
    """Mean segment angle folded into [0, pi/2)."""
    if not g.n_edges:
        return 0.0
    d = g.nodes[g.edges[:, 1]] - g.nodes[g.edges[:, 0]]
    a = np.mod(np.arctan2(d[:, 1], d[:, 0]), np.pi / 2)
    a[a > np.pi / 2 - 1e-9] = 0.0
    return float(a.mean())


def urban_features(g: mm.PlainGraph, region_radius: float = REGION_RADIUS_M, n_probes: int = N_PROBES,
                   rng=None, fov_m: float | None = None) -> FeatureSample:
    """Per-map urban-planning features. Probe points are uniform over the fov square (or the bbox)."""
    rng = np.random.default_rng(0) if rng is None else rng
    if g.n_nodes == 0:
        raise ValueError("empty graph")
    flags = []
    deg = g.degrees()
    fov = fov_m if fov_m is not None else g.fov_m
    if fov:
        lo, hi = np.zeros(2), np.full(2, float(fov))
    else:
        x0, y0, x1, y1 = g.bbox
        lo, hi = np.array([x0, y0]), np.array([x1, y1])
    probes = lo + rng.random((n_probes, 2)) * (hi - lo)
    from scipy.spatial import cKDTree
    tree = cKDTree(g.nodes)
    density = float(np.mean([len(x) for x in tree.query_ball_point(probes, region_radius)]))
    A = _csr(g, weighted=False)
    reach = []
    for p in probes:
        dist, i = tree.query(p)
        if dist > region_radius:
            reach.append(0)
            continue
        inside = np.hypot(*(g.nodes - p).T) <= region_radius
        sub = A.multiply(inside[:, None]).multiply(inside[None, :]).tocsr()
        seen = breadth_first_order(sub, int(i), directed=False, return_predecessors=False)
        mask = np.zeros(g.n_nodes, bool)
        mask[seen] = True
        e = g.edges
        reach.append(int(np.sum(mask[e[:, 0]] & mask[e[:, 1]])) if len(e) else 0)
    D = shortest_path(_csr(g, weighted=True), method="D", directed=False)
    iu, ju = np.triu_indices(g.n_nodes, 1)
    fin = np.isfinite(D[iu, ju])
    pairs = np.stack([iu[fin], ju[fin]], 1)
    if len(pairs) == 0:
        convenience = None
        flags.append("no connected pair")
    else:
        if len(pairs) > n_probes:
            pairs = pairs[rng.choice(len(pairs), n_probes, replace=False)]
        convenience = float(D[pairs[:, 0], pairs[:, 1]].mean())
    ll = lane_lengths(g)
    return FeatureSample(
        length=float(ll.mean()) if len(ll) else 0.0,
        orientation=orientation_stat(g),
        connectivity=float(deg.mean()),
        density=density,
        reach=float(np.mean(reach)),
        convenience=convenience,
        flags=flags,
    )


# ---------------------------------------------------------------- diversity

def chamfer(A, B) -> float:
    """mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 2)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 2)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    return float(min_sq_dists(A, B).mean() + min_sq_dists(B, A).mean())


def map_points(g: mm.PlainGraph, fov_m: float | None = None) -> np.ndarray:
    """All control points in normalized patch coordinates."""
    fov = fov_m or g.fov_m or 200.0
    return g.nodes * (2.0 / fov) - 1.0


def diversity_report(samples, reference) -> tuple[float, float]:
    """(chamfer_to_gt, chamfer_internal), both scaled by 1e4. Inputs are point sets."""
    if not len(samples) or not len(reference):
        raise ValueError("empty set")
    to_gt = float(np.mean([min(chamfer(s, r) for r in reference) for s in samples]))
    pairs = [(i, j) for i in range(len(samples)) for j in range(i + 1, len(samples))]
    internal = float(np.mean([chamfer(samples[i], samples[j]) for i, j in pairs])) if pairs else 0.0
    return to_gt * CHAMFER_SCALE, internal * CHAMFER_SCALE


def dead_end_count(g: mm.PlainGraph, fov_m: float | None = None, margin: float | None = None) -> int:
    """Degree-1 nodes farther than ``margin`` from every side of the fov square."""
    fov = fov_m or g.fov_m or 200.0
    margin = DEAD_END_MARGIN_FRAC * fov if margin is None else margin
    if g.n_nodes == 0:
        return 0
    deg = g.degrees()
    p = g.nodes
    dist = np.minimum(np.minimum(p[:, 0], fov - p[:, 0]), np.minimum(p[:, 1], fov - p[:, 1]))
    return int(np.sum((deg == 1) & (dist > margin)))


def dead_end_rate(graphs, fov_m: float | None = None, margin: float | None = None) -> float:
    return float(np.mean([dead_end_count(g, fov_m, margin) for g in graphs]))


# ---------------------------------------------------------------- latency

def latency_bench(sample_fn, n_samples: int, warmup: int = 1, repeats: int = 3, seed: int = 0) -> dict:
    """Mean wall-clock seconds per generated map, BLAS pinned to one thread."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(1)
    except ImportError:  # pragma: no cover
        limiter = None
    try:
        rng = np.random.default_rng([seed, 99])
        for _ in range(warmup):
            sample_fn(rng)
        runs = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, r])
            t0 = time.perf_counter()
            for _ in range(n_samples):
                sample_fn(rng)
            runs.append((time.perf_counter() - t0) / n_samples)
    finally:
        if limiter is not None:
            limiter.unregister()
    runs = np.asarray(runs)
    return {"mean_s": float(runs.mean()), "std_s": float(runs.std()), "runs_s": runs.tolist(),
            "n_samples": n_samples, "repeats": repeats}


# ---------------------------------------------------------------- report

@dataclass
class MetricsReport:
    mmd_degree: float
    mmd_spectrum: float
    frechet: dict
    chamfer_to_gt: float
    chamfer_internal: float
    dead_end_rate: float
    n_samples: int
    n_reference: int
    latency: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate_sets(samples, reference, seed: int = 0, region_radius: float = REGION_RADIUS_M,
                  n_probes: int = N_PROBES, bins: int = SPECTRUM_BINS, fov_m: float | None = None) -> MetricsReport:
    """Compare two lists of PlainGraphs (meters, patch frame)."""
    if not samples or not reference:
        raise ValueError("samples and reference must be non-empty")
    fov = fov_m or reference[0].fov_m or 200.0
    dS = [degree_hist(g) for g in samples]
    dR = [degree_hist(g) for g in reference]
    sig_d = median_sigma(dR)
    bw = 2.0 / bins
    sS = [laplacian_spectrum(g, bins) for g in samples]
    sR = [laplacian_spectrum(g, bins) for g in reference]
    sig_s = median_sigma(sR, bw)
    # common random numbers: map i of either set draws its probes from the same stream
    fS = [urban_features(g, region_radius, n_probes, np.random.default_rng([seed, i]), fov)
          for i, g in enumerate(samples)]
    fR = [urban_features(g, region_radius, n_probes, np.random.default_rng([seed, i]), fov)
          for i, g in enumerate(reference)]
    fr = {}
    for name in FEATURES:
        a = [getattr(f, name) for f in fS if getattr(f, name) is not None]
        b = [getattr(f, name) for f in fR if getattr(f, name) is not None]
        fr[name] = frechet_normal(a, b) if len(a) >= 2 and len(b) >= 2 else None
    to_gt, internal = diversity_report([map_points(g, fov) for g in samples], [map_points(g, fov) for g in reference])
    return MetricsReport(
        mmd_degree=max(0.0, mmd(dS, dR, sig_d)),
        mmd_spectrum=max(0.0, mmd(sS, sR, sig_s, bw)),
        frechet=fr,
        chamfer_to_gt=to_gt,
        chamfer_internal=internal,
        dead_end_rate=dead_end_rate(samples, fov),
        n_samples=len(samples),
        n_reference=len(reference),
        meta={"seed": seed, "sigma_degree": sig_d, "sigma_spectrum": sig_s, "region_radius_m": region_radius,
              "n_probes": n_probes, "spectrum_bins": bins, "fov_m": fov,
              "dead_end_margin_m": DEAD_END_MARGIN_FRAC * fov, "chamfer_scale": CHAMFER_SCALE},
    )
