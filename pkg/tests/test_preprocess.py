import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanegraph import map_model as mm
from lanegraph import preprocess as pp
from lanegraph.preprocess import PatchConfig

from conftest import path_graph, plus_graph, same_graph


def test_decimate_collinear():
    out = pp.decimate([(0, 0), (1, 0), (2, 0)], 0.01)
    assert np.array_equal(out, [(0, 0), (2, 0)])


def test_decimate_keeps_corner():
    P = np.array([(0, 0), (1, 0), (1, 1)], float)
    assert np.array_equal(pp.decimate(P, 0.01), P)


def test_decimate_quarter_arc_removes_about_70_percent():
    t = np.linspace(0, np.pi / 2, 100)
    P = np.c_[np.cos(t), np.sin(t)] * 50
    step = t[1] - t[0]
    # flattest-first removal leaves survivors 3-4 steps apart for tol in (2, 3) steps
    out = pp.decimate(P, 2.5 * step)
    assert 0.65 <= 1 - len(out) / len(P) <= 0.75


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=2, max_size=30),
       st.floats(0.0, 1.0))
def test_decimate_idempotent(pts, tol):
    P = np.array(pts)
    once = pp.decimate(P, tol)
    assert np.array_equal(pp.decimate(once, tol), once)
    assert np.array_equal(once[0], P[0]) and np.array_equal(once[-1], P[-1])


def test_hausdorff_of_decimation_is_small_for_gentle_arc():
    t = np.linspace(0, 0.3, 40)
    P = np.c_[np.sin(t), 1 - np.cos(t)] * 100
    out, err = pp.decimate(P, 0.04, return_error=True)
    assert len(out) < len(P) and err < 1.0


def test_keypoints_path():
    assert pp.extract_keypoints(path_graph(3)) == {0, 2}


def test_keypoints_plus():
    assert pp.extract_keypoints(plus_graph()) == {0, 1, 2, 3, 4}


def test_keypoints_cycle_promotes_one():
    g = mm.PlainGraph([(0, 0), (1, 0), (1, 1), (0, 1)], [(0, 1), (1, 2), (2, 3), (3, 0)])
    keys = pp.extract_keypoints(g)
    assert len(keys) == 1
    h = pp.build_hierarchical(g, PatchConfig(fov_m=10, max_local_W=4))
    assert same_graph(mm.flatten(h), g)


def test_build_hier_single_lane():
    g = path_graph(4)
    h = pp.build_hierarchical(g, PatchConfig(fov_m=10, max_local_W=4, seed=0))
    assert h.n_nodes == 2 and len(h.edge_list()) == 1
    (key,) = h.edge_list()
    assert h.valid_count(key) == 2


def test_build_hier_empty_interior_masks():
    g = plus_graph()
    h = pp.build_hierarchical(g, PatchConfig(fov_m=10, max_local_W=4))
    assert all(not m.any() for _, m in h.local_paths.values())


def test_build_hier_overflow():
    with pytest.raises(pp.LocalOverflow):
        pp.build_hierarchical(path_graph(12), PatchConfig(fov_m=20, max_local_W=4))


def test_dfs_triangle():
    A = np.ones((3, 3), bool) & ~np.eye(3, dtype=bool)
    assert pp.dfs_order(A, start=0).tolist() == [0, 1, 2]


def test_dfs_single_node():
    assert pp.dfs_order(np.zeros((1, 1), bool), seed=5).tolist() == [0]


def test_dfs_two_components():
    A = np.zeros((4, 4), bool)
    A[0, 1] = A[1, 0] = A[2, 3] = A[3, 2] = True
    assert pp.dfs_order(A, start=3).tolist() == [3, 2, 0, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(0.1, 0.6))
def test_dfs_prefix_connected_property(n, seed, p):
    from scipy.sparse.csgraph import connected_components

    rng = np.random.default_rng(seed)
    A = np.triu(rng.random((n, n)) < p, 1)
    A = A | A.T
    order = pp.dfs_order(A, seed=seed)
    assert sorted(order.tolist()) == list(range(n))
    n_comp, labels = connected_components(A)
    for k in range(1, n + 1):
        pre = order[:k]
        sub = A[np.ix_(pre, pre)]
        # components of the prefix subgraph equal the number of original components touched
        assert connected_components(sub)[0] == len(set(labels[pre].tolist()))


def test_patch_fov_equals_bbox():
    g = mm.PlainGraph([(0, 0), (10, 0), (10, 10)], [(0, 1), (1, 2)])
    (p,) = pp.sample_patches(g, PatchConfig(fov_m=10, seed=0), 1)
    assert same_graph(p, g)


def test_patches_valid_and_inside(city):
    cfg = PatchConfig(seed=4)
    ps = pp.sample_patches(city.graph, cfg, 20)
    for p in ps:
        assert mm.validate(p) == [] and p.n_edges >= 1
        assert p.nodes.min() >= -1e-9 and p.nodes.max() <= cfg.fov_m + 1e-9


def test_patches_deterministic(city):
    cfg = PatchConfig(seed=9)
    a = pp.sample_patches(city.graph, cfg, 100)
    b = pp.sample_patches(city.graph, cfg, 100)
    assert all(mm.dumps(x) == mm.dumps(y) for x, y in zip(a, b))


def test_normalize_points():
    t = pp.fov_transform(200.0)
    assert np.allclose(t.forward([100, 100]), [0, 0])
    assert np.allclose(t.forward([0, 0]), [-1, -1])


def test_normalize_roundtrip(hier_patches):
    for h in hier_patches:
        hn, t = pp.normalize(h, 200.0)
        assert np.abs(hn.global_nodes).max() <= 1 + 1e-12
        back = pp.denormalize(hn, t)
        assert np.abs(back.global_nodes - h.global_nodes).max() < 1e-9
        for k, (c, m) in h.local_paths.items():
            assert np.allclose(back.local_paths[k][0][m], c[m], rtol=0, atol=1e-9)


def test_normalize_rejects_outside():
    g = mm.HierGraph([(0, 0), (300, 0)], [[0, 1], [1, 0]], {}, {}, 4, [0, 1])
    with pytest.raises(ValueError):
        pp.normalize(g, 200.0)


def test_global_share_near_thirty_percent(patches):
    # share of the (decimated) control points that become global nodes
    dec = sum(d.n_nodes for _, _, d, _ in patches)
    glob = sum(h.n_nodes for *_, h in patches)
    assert 0.20 <= glob / dec <= 0.40


def test_patch_config_validation():
    with pytest.raises(ValueError):
        PatchConfig(fov_m=0)
    with pytest.raises(ValueError):
        PatchConfig(max_local_W=0)
