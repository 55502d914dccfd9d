import copy

import numpy as np
import pytest

from lanegraph import hdmapgen as hg
from lanegraph import map_model as mm
from lanegraph.nn import grad_check, gru_step, gmm_nll, bernmix_logprob

VARIANTS = hg.VARIANTS


def tiny_model(variant, seed=0, W=4, local=True, dtype=np.float64, hidden=12, layers=2, max_nodes=12):
    cfg = hg.ModelConfig(variant, hidden=hidden, layers=layers, K=3, Kb=3, max_nodes=max_nodes, W=W, local=local)
    return hg.Model.init(cfg, seed=seed, dtype=dtype)


def examples_from(hs, n=2):
    return [hg.example_from_hier(hg.normalize_hier(h, 200.0)) for h in hs[:n]]


def small_hier(hier_patches, max_n=7):
    """Fixture patches trimmed to a few nodes so 64-bit grad checks stay quick."""
    out = []
    for h in hier_patches:
        if 3 <= h.n_nodes <= max_n:
            out.append(h)
    return out


@pytest.mark.parametrize("variant", VARIANTS)
def test_teacher_forced_gradients(variant, hier_patches):
    hs = small_hier(hier_patches)
    ex = examples_from(hs, 2)
    model = tiny_model(variant, W=hs[0].W, max_nodes=max(e.N for e in ex) + 2)
    plan = hg.build_plan(model.cfg, ex, None, (1, 1, 1, 1, 1), np.float64)
    hg.refresh_stop_coords(model.params, model.cfg, plan)
    fn = lambda p: hg.plan_loss(p, model.cfg, plan)[:2]
    assert grad_check(fn, model.params, n_coords=128, rng=np.random.default_rng(1)) < 1e-4


def test_loss_terms_add_up(hier_patches):
    ex = examples_from(small_hier(hier_patches), 2)
    for var in VARIANTS:
        m = tiny_model(var, W=8, max_nodes=max(e.N for e in ex) + 2)
        parts = [hg.teacher_forced_loss(m, ex, lam)[0] for lam in
                 [(1, 0, 0, 0, 0), (0, 1, 0, 0, 0), (0, 0, 1, 0, 0), (0, 0, 0, 1, 0), (0, 0, 0, 0, 1)]]
        total = hg.teacher_forced_loss(m, ex)[0]
        assert total == pytest.approx(sum(parts), rel=1e-10)


def test_masked_local_slots_do_not_enter_loss(hier_patches):
    ex = examples_from(small_hier(hier_patches), 2)
    m = tiny_model("independent", W=8, max_nodes=max(e.N for e in ex) + 2)
    base = hg.teacher_forced_loss(m, ex)[0]
    ex2 = copy.deepcopy(ex)
    for e in ex2:
        e.local_xy[~e.local_mask] = 123.0
    assert hg.teacher_forced_loss(m, ex2)[0] == pytest.approx(base, rel=1e-12)
    ex3 = copy.deepcopy(ex)
    r = np.argwhere(ex3[0].local_mask)[0]
    ex3[0].local_xy[r[0], r[1]] += 0.5
    assert hg.teacher_forced_loss(m, ex3)[0] > base


def test_deterministic_loss(hier_patches):
    ex = examples_from(hier_patches, 3)
    m = tiny_model("coordinate_first", W=8, max_nodes=64)
    a = hg.teacher_forced_loss(m, ex)
    b = hg.teacher_forced_loss(m, ex)
    assert a[0] == b[0] and all(np.array_equal(a[1][k], b[1][k]) for k in a[1])


def test_prefix_length_rule():
    assert hg.prefix_length([0.9, 0.6, 0.4, 0.7]) == 2
    assert hg.prefix_length([0.1, 0.9]) == 0
    assert hg.prefix_length([0.9, 0.9]) == 2


def test_edge_frame_roundtrip():
    rng = np.random.default_rng(0)
    Cs, Ct = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    P = rng.normal(size=(5, 4, 2))
    assert np.allclose(hg.from_edge_frame(hg.to_edge_frame(P, Cs, Ct), Cs, Ct), P)
    # the endpoints map to (0, 0) and (1, 0)
    assert np.allclose(hg.to_edge_frame(Ct[:, None], Cs, Ct)[:, 0], [1, 0])


def test_encode_empty_context_is_start_state():
    m = tiny_model("independent")
    E = hg.encode_context(m, np.zeros((0, 2)), np.zeros((0, 0), bool))
    assert E.shape == (1, m.cfg.hidden)
    e = (m.params["enc.b"] + m.params["enc.start"])[None]
    for l in range(m.cfg.layers):
        e = gru_step(m.params, e, np.zeros_like(e), prefix=f"gnn.{l}.gru")
    assert np.allclose(E, e)


def test_encode_zero_weights_rows_equal_bias():
    m = tiny_model("independent")
    m.params["enc.WL"] = np.zeros_like(m.params["enc.WL"])
    m.params["enc.WC"] = np.zeros_like(m.params["enc.WC"])
    b = hg._GraphBatch(m.cfg.max_nodes)
    b.add(np.random.default_rng(0).normal(size=(4, 2)), np.eye(4, k=1, dtype=bool) | np.eye(4, k=-1, dtype=bool))
    cfg0 = copy.copy(m.cfg)
    cfg0.layers = 0
    E0, _ = hg.encode(m.params, cfg0, b.finish(np.float64))
    assert np.allclose(E0[:4], m.params["enc.b"])


def test_encode_context_equivariance():
    rng = np.random.default_rng(3)
    m = tiny_model("independent")
    n = 5
    C = rng.uniform(-1, 1, size=(n, 2))
    A = np.triu(rng.random((n, n)) < 0.5, 1)
    A = A | A.T
    perm = rng.permutation(n)
    # node ids in the adjacency rows are positional, so relabel both rows and columns of the one-hot block
    E = hg.encode_context(m, C, A)
    Ep = hg.encode_context(m, C[perm], A[np.ix_(perm, perm)])
    # the adjacency one-hot encoding is position-dependent; equivariance holds for the propagation given E0,
    # so compare after permuting the encoder's row-embedding to match
    m2 = hg.Model(m.cfg, m.params.copy(), {})
    WL = m.params["enc.WL"].copy()
    WL[:n] = WL[:n][perm]
    m2.params["enc.WL"] = WL
    Ep2 = hg.encode_context(m2, C[perm], A[np.ix_(perm, perm)])
    assert np.allclose(Ep2[:n], E[:n][perm], atol=1e-10) and np.allclose(Ep2[n], E[n], atol=1e-10)
    assert Ep.shape == E.shape


def test_global_step_greedy_and_seeded(trained_small):
    model, _ = trained_small
    C = np.array([[0.0, 0.0], [0.2, 0.0]])
    A = np.array([[0, 1], [1, 0]], bool)
    s1, _ = hg.global_step(model, C, A, 0.0, np.random.default_rng(5))
    s2, _ = hg.global_step(model, C, A, 0.0, np.random.default_rng(5))
    assert np.array_equal(s1.C, s2.C) and np.array_equal(s1.L, s2.L)
    g = hg.coord_head(model, hg.encode_context(model, C, A)[2])
    assert np.allclose(s1.C, g.mu[np.argmax(g.pi)])
    assert s1.L.shape == (2,)
    # topology term equals the mixture log-probability under the conditioned states
    E = hg.encode_context(model, C, A, C_inj=s1.C)
    assert s1.topo_nll == pytest.approx(-bernmix_logprob(hg.topo_head(model, E, 2), s1.L), rel=1e-5)


def test_independent_heads_share_context():
    m = tiny_model("independent", dtype=np.float64)
    C = np.array([[0.0, 0.0], [0.3, 0.1], [0.5, -0.2]])
    A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], bool)
    step, _ = hg.global_step(m, C, A, 0.5, np.random.default_rng(1))
    E = hg.encode_context(m, C, A)
    assert step.coord_nll == pytest.approx(gmm_nll(hg.coord_head(m, E[3]), step.C))
    assert step.topo_nll == pytest.approx(-bernmix_logprob(hg.topo_head(m, E, 3), step.L))


def test_sample_max_nodes_one(trained_small):
    model, _ = trained_small
    h = hg.sample(model, 0.2, max_nodes=1, rng=np.random.default_rng(0))
    assert h.n_nodes == 1 and not h.global_adj.any()


def test_sample_deterministic_and_valid(trained_small):
    model, _ = trained_small
    for i in range(8):
        a = hg.sample(model, 0.3, rng=np.random.default_rng([4, i]))
        b = hg.sample(model, 0.3, rng=np.random.default_rng([4, i]))
        assert mm.dumps(a) == mm.dumps(b)
        assert mm.validate(a) == [] and mm.validate(mm.flatten(a)) == []


def test_training_reduces_loss(trained_small):
    _, hist = trained_small
    assert hist[-1]["loss"] < hist[0]["loss"] - 2.0
    for k in ("train_coord_nll", "train_topo_bce", "train_local_mse", "train_mask_bce", "train_sem_bce"):
        assert k in hist[0]


def test_checkpoint_roundtrip(trained_small, tmp_path):
    model, _ = trained_small
    model.save(tmp_path / "m.ckpt")
    m2, _, _ = hg.Model.load(tmp_path / "m.ckpt")
    a = hg.sample(model, 0.2, rng=np.random.default_rng(1))
    b = hg.sample(m2, 0.2, rng=np.random.default_rng(1))
    assert mm.dumps(a) == mm.dumps(b) and m2.meta["kind"] == "hdmapgen"


def _two_lane_map(light=False):
    nodes = [(40, 40), (160, 40), (160, 160)]
    adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], bool)
    W = 4
    z = (np.zeros((W, 2)), np.zeros(W, bool))
    return mm.HierGraph(nodes, adj, {(0, 1): z, (1, 2): z}, {(0, 1): light, (1, 2): light}, W, [0, 1, 2],
                        fov_m=200.0)


def test_straight_lanes_and_no_lights_overfit():
    h = _two_lane_map()
    cfg = hg.TrainConfig("coordinate_first", hidden=24, layers=1, epochs=150, lr=5e-3, batch_size=1, seed=0)
    model, hist = hg.train([h], cfg)
    assert (hist[0]["loss"] - hist[-1]["loss"]) / abs(hist[0]["loss"]) >= 0.9
    ex = hg.example_from_hier(hg.normalize_hier(h, 200.0))
    E = hg.encode_context(model, ex.C[:2], ex.A[:2, :2], C_inj=ex.C[2])
    out = hg.decode_local(model, E[2], E[1:2], ex.C[2], ex.C[1:2])[0]
    assert out.mask.max() < 0.5 and out.valid_length() == 0
    assert out.light < 0.5


def test_lights_concentrate_near_intersections(trained_small):
    # short lanes are turn lanes and intersection approaches; long ones run mid-block
    model, _ = trained_small
    short, long_ = [], []
    for i in range(24):
        h = hg.sample(model, 0.2, rng=np.random.default_rng([11, i]))
        for (a, b), flag in h.semantics.items():
            d = np.hypot(*(h.global_nodes[a] - h.global_nodes[b]))
            if d < 30:
                short.append(flag)
            elif d >= 60:
                long_.append(flag)
    assert len(short) and len(long_)
    assert np.mean(short) > np.mean(long_)


def test_config_validation():
    with pytest.raises(ValueError):
        hg.TrainConfig("sideways")
    with pytest.raises(ValueError):
        hg.TrainConfig(lambda_topo=-1)
    with pytest.raises(ValueError):
        hg.ModelConfig(layers=0)
