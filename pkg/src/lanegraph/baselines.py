"""Comparison models.

PlainGen runs the global generator over every control point of the
decimated plain graph (no local or semantic heads). SeqGen is a decoder-only
recurrent stroke model: per step a diagonal 2D GMM over the offset and a
3-way categorical over the pen state.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from . import hdmapgen as hg
from . import map_model as mm
from .nn.mixtures import LOGSIG_RANGE
from .nn import (Adam, ParamStore, gmm_from_raw, gmm_nll_raw, gmm_sample, gru_backward, gru_forward, gru_init,
                 load_checkpoint, mlp_backward, mlp_forward, mlp_init, save_checkpoint)
from .preprocess import fov_transform

SEQ_PARAM_VERSION = "seqgen-1"


# ---------------------------------------------------------------- PlainGen

def plain_examples(dataset, fov_m: float, seed: int = 0):
    """Flatten HierGraphs and order every control point by DFS (seeded per map)."""
    tr = fov_transform(fov_m)
    out = []
    for i, h in enumerate(dataset):
        g = mm.flatten(h)
        gn = mm.PlainGraph(tr.forward(g.nodes), g.edges, g.light, fov_m=2.0)
        out.append(hg.example_from_plain(gn, seed=int(np.random.default_rng([seed, i, 2]).integers(2**31))))
    return out


def plaingen_train(dataset, cfg: hg.TrainConfig, val=None, report=None, fov_m: float | None = None, log=None):
    if cfg.variant not in ("topology_first", "coordinate_first"):
        raise ValueError("plaingen supports topology_first and coordinate_first")
    if not dataset:
        raise ValueError("empty dataset")
    fov_m = fov_m or dataset[0].fov_m or 200.0
    ex = plain_examples(dataset, fov_m, cfg.seed)
    vex = plain_examples(val, fov_m, cfg.seed + 1) if val else None
    model, hist = hg.train(None, cfg, val=vex, report=report, fov_m=fov_m, W=0, local=False, examples=ex, log=log)
    model.meta["kind"] = "plaingen"
    return model, hist


def plaingen_sample(model: hg.Model, tau: float = 0.2, max_nodes: int | None = None, rng=None,
                    return_info=False) -> mm.PlainGraph:
    rng = np.random.default_rng(0) if rng is None else rng
    if max_nodes is None:
        max_nodes = int(rng.choice(model.meta.get("sizes") or [model.cfg.max_nodes - 1]))
    C, A, steps, _ = hg.sample_global(model, tau, max_nodes, rng)
    tr = fov_transform(model.cfg.fov_m)
    iu, ju = np.nonzero(np.triu(A, 1))
    g = mm.merge_coincident(tr.inverse(C), np.stack([iu, ju], 1), fov_m=model.cfg.fov_m)
    g = mm.check(g)
    if return_info:
        return g, {"n_nodes": len(C), "hit_cap": len(C) >= max_nodes, "degenerate": len(C) <= 1}
    return g


# ---------------------------------------------------------------- SeqGen

@dataclass
class SeqConfig:
    hidden: int = 256
    layers: int = 2
    K: int = 20
    fov_m: float = 200.0
    max_len: int = 256
    # floor on log sigma of the offset head; the default matches the shared GMM head
    min_logsig: float = LOGSIG_RANGE[0]

    @property
    def logsig_range(self):
        return (self.min_logsig, LOGSIG_RANGE[1])


@dataclass
class SeqTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    hidden: int = 256
    layers: int = 2
    K: int = 20
    val_every: int = 1
    dtype: str = "float32"
    min_logsig: float = LOGSIG_RANGE[0]

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.layers < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and layers >= 1 required")


class SeqModel:
    def __init__(self, cfg: SeqConfig, params: ParamStore, meta: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.meta = {"kind": "seqgen", **(meta or {})}

    @classmethod
    def init(cls, cfg: SeqConfig, seed=0, dtype=np.float32, meta=None):
        rng = np.random.default_rng(seed)
        ps = ParamStore(dtype, seed=seed, version=SEQ_PARAM_VERSION)
        n_in = 5
        for l in range(cfg.layers):
            gru_init(ps, f"rnn.{l}", n_in, cfg.hidden, rng)
            n_in = cfg.hidden
        mlp_init(ps, "out", [cfg.hidden, 5 * cfg.K + 3], rng)
        return cls(cfg, ps, meta)

    def save(self, path, optimizer=None, rng=None, extra=None):
        save_checkpoint(path, self.params, {"seq": asdict(self.cfg), **self.meta, **(extra or {})}, optimizer, rng)

    @classmethod
    def load(cls, path):
        params, meta, opt, rng = load_checkpoint(path)
        meta = dict(meta)
        cfg = SeqConfig(**meta.pop("seq"))
        return cls(cfg, params, meta), opt, rng


def map_to_sequence(h_or_g, fov_m: float) -> mm.SequenceRep:
    """Normalized stroke sequence; the first step jumps from the patch center."""
    g = mm.flatten(h_or_g) if isinstance(h_or_g, mm.HierGraph) else h_or_g
    seq = mm.to_sequence(g, origin_rule=(fov_m / 2, fov_m / 2))
    s = 2.0 / fov_m
    return mm.SequenceRep(seq.deltas * s, seq.states, np.zeros(2))


def sequence_to_map(seq_norm: mm.SequenceRep, fov_m: float) -> mm.PlainGraph:
    s = 2.0 / fov_m
    seq = mm.SequenceRep(seq_norm.deltas / s, seq_norm.states, np.array([fov_m / 2, fov_m / 2]))
    return mm.sequence_to_plain(seq, origin_drawn=False, fov_m=fov_m)


START = np.array([0.0, 0.0, 1.0, 0.0, 0.0])


def _inputs(seq: mm.SequenceRep):
    """Input at step k is step k-1 as [dx, dy, onehot(q)].

    Step 0 sees the start token: zero offset with the pen-lift state, since the
    first step jumps from the patch center.
    """
    T = len(seq)
    X = np.zeros((T, 5))
    X[0] = START
    if T > 1:
        X[1:, :2] = seq.deltas[:-1]
        X[np.arange(1, T), 1 + seq.states[:-1]] = 1.0
    return X


def _pack(seqs, dtype):
    T = max(len(s) for s in seqs)
    B = len(seqs)
    X = np.zeros((T, B, 5), dtype)
    Yd = np.zeros((T, B, 2), dtype)
    Yq = np.zeros((T, B), np.int64)
    w = np.zeros((T, B), dtype)
    for b, s in enumerate(seqs):
        n = len(s)
        X[:n, b] = _inputs(s)
        Yd[:n, b] = s.deltas
        Yq[:n, b] = s.states - 1
        w[:n, b] = 1.0 / (n * B)
    return X, Yd, Yq, w


def seq_loss(ps, cfg: SeqConfig, packed, want_grad=True):
    """Mean per-step NLL (offset GMM + pen-state cross entropy) averaged over sequences."""
    X, Yd, Yq, w = packed
    T, B, _ = X.shape
    H, K = cfg.hidden, cfg.K
    h = [np.zeros((B, H), X.dtype) for _ in range(cfg.layers)]
    caches = []
    tops = []
    for k in range(T):
        inp = X[k]
        ck = []
        for l in range(cfg.layers):
            h[l], c = gru_forward(ps, f"rnn.{l}", h[l], inp, want_grad)
            ck.append(c)
            inp = h[l]
        caches.append(ck)
        tops.append(inp)
    Hs = np.concatenate(tops)  # (T*B, H)
    raw, co = mlp_forward(ps, "out", Hs, want_grad)
    wf = w.reshape(-1)
    nll, draw = gmm_nll_raw(raw[:, :5 * K], Yd.reshape(-1, 2), K, cfg.logsig_range)
    lq = log_softmax(raw[:, 5 * K:], axis=1)
    yq = Yq.reshape(-1)
    ce = -lq[np.arange(len(yq)), yq]
    loss = float((wf * (nll + ce)).sum())
    valid = wf > 0
    stats = {"offset_nll": (float(nll[valid].sum()), int(valid.sum())),
             "state_ce": (float(ce[valid].sum()), int(valid.sum()))}
    if not want_grad:
        return loss, None, stats
    grads = {}
    dq = np.exp(lq)
    dq[np.arange(len(yq)), yq] -= 1
    draw_all = np.concatenate([draw, dq], axis=1) * wf[:, None]
    dHs = mlp_backward(ps, "out", co, draw_all.astype(X.dtype), grads).reshape(T, B, H)
    dh_next = [np.zeros((B, H), X.dtype) for _ in range(cfg.layers)]
    for k in range(T - 1, -1, -1):
        d_above = dHs[k]
        for l in range(cfg.layers - 1, -1, -1):
            dh_prev, dx = gru_backward(ps, f"rnn.{l}", caches[k][l], d_above + dh_next[l], grads)
            dh_next[l] = dh_prev
            d_above = dx
    return loss, grads, stats


def seqgen_train(dataset, cfg: SeqTrainConfig, val=None, report=None, fov_m: float | None = None, log=None):
    if not dataset:
        raise ValueError("empty dataset")
    fov_m = fov_m or dataset[0].fov_m or 200.0
    seqs = [map_to_sequence(h, fov_m) for h in dataset]
    vseqs = [map_to_sequence(h, fov_m) for h in (val or [])]
    dtype = np.dtype(cfg.dtype)
    lens = [len(s) for s in seqs]
    scfg = SeqConfig(cfg.hidden, cfg.layers, cfg.K, fov_m, int(np.ceil(1.25 * max(lens))), cfg.min_logsig)
    model = SeqModel.init(scfg, cfg.seed, dtype, meta={"lengths": lens, "train": asdict(cfg)})
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    history = []
    fh = open(report, "w") if isinstance(report, (str, Path)) else report
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(len(seqs))
            tot = 0.0
            acc = {}
            for bi in range(0, len(perm), cfg.batch_size):
                key = tuple(sorted(perm[bi:bi + cfg.batch_size].tolist()))
                loss, grads, st = seq_loss(model.params, scfg, _pack([seqs[i] for i in key], dtype))
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                opt.step(model.params, grads)
                tot += loss * len(key)
                hg._merge_stats(acc, st)
            rec = {"epoch": epoch, "loss": tot / len(seqs),
                   **{f"train_{k}": v for k, v in hg._finish_stats(acc).items()}}
            if vseqs and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
                rec.update({f"val_{k}": v for k, v in seq_evaluate(model, vseqs).items()})
            history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if log is not None:
                log(rec)
    finally:
        if fh is not None and fh is not report:
            fh.close()
    model._optimizer = opt
    return model, history


def seq_evaluate(model: SeqModel, seqs, batch_size=32) -> dict:
    acc = {}
    tot = 0.0
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        loss, _, st = seq_loss(model.params, model.cfg, _pack(chunk, model.params.dtype), want_grad=False)
        tot += loss * len(chunk)
        hg._merge_stats(acc, st)
    out = hg._finish_stats(acc)
    out["loss"] = tot / max(1, len(seqs))
    return out


def _step(model: SeqModel, h, x):
    inp = np.asarray(x, dtype=model.params.dtype)[None]
    for l in range(model.cfg.layers):
        h[l] = gru_forward(model.params, f"rnn.{l}", h[l], inp, keep_cache=False)[0]
        inp = h[l]
    raw = mlp_forward(model.params, "out", inp, keep_cache=False)[0][0].astype(np.float64)
    return raw


def teacher_forced_decode(model: SeqModel, seq: mm.SequenceRep):
    """Greedy offsets and argmax states given the true prefix at every step."""
    K = model.cfg.K
    H = model.cfg.hidden
    h = [np.zeros((1, H), model.params.dtype) for _ in range(model.cfg.layers)]
    X = _inputs(seq)
    D = np.zeros((len(seq), 2))
    Q = np.zeros(len(seq), np.int64)
    for k in range(len(seq)):
        raw = _step(model, h, X[k])
        D[k] = gmm_sample(gmm_from_raw(raw[:5 * K], K, model.cfg.logsig_range), 0.0, None)
        Q[k] = int(np.argmax(raw[5 * K:])) + 1
    return mm.SequenceRep(D, Q, seq.origin)


def seqgen_sample(model: SeqModel, tau: float = 0.2, max_len: int | None = None, rng=None, return_info=False):
    """Free-running generation; stops at q=3 or ``max_len`` (then truncated and flagged)."""
    rng = np.random.default_rng(0) if rng is None else rng
    if tau < 0:
        raise ValueError("tau must be >= 0")
    max_len = max_len or model.cfg.max_len
    K = model.cfg.K
    H = model.cfg.hidden
    h = [np.zeros((1, H), model.params.dtype) for _ in range(model.cfg.layers)]
    x = START.copy()
    D, Q = [], []
    for _ in range(max_len):
        raw = _step(model, h, x)
        d = gmm_sample(gmm_from_raw(raw[:5 * K], K, model.cfg.logsig_range), tau, rng)
        q = int(rng.choice(3, p=softmax(raw[5 * K:]))) + 1
        D.append(d)
        Q.append(q)
        if q == 3:
            break
        x = np.zeros(5)
        x[:2] = d
        x[1 + q] = 1.0
    truncated = Q[-1] != 3
    if truncated:
        Q[-1] = 3
    seq = mm.SequenceRep(np.array(D).reshape(-1, 2), np.array(Q), np.zeros(2))
    g = mm.check(sequence_to_map(seq, model.cfg.fov_m))
    info = {"steps": len(Q), "truncated": truncated, "empty": len(Q) == 1}
    return (g, info) if return_info else g
