"""Desk-scale experiment runners shared by the acceptance tests.

Also runnable directly to print the raw numbers:

    python3 tests/_desk.py ablation --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import json
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lanegraph import baselines as bl
from lanegraph import hdmapgen as hg
from lanegraph import map_model as mm
from lanegraph import metrics
from lanegraph.preprocess import PatchConfig, preprocess_map
from lanegraph.synth_data import CityConfig, corpus, generate_city

WORK = Path(os.environ.get("LANEGRAPH_ACCEPT_DIR", Path(tempfile.gettempdir()) / "lanegraph-accept"))

# desk configuration: narrower and shallower than the library defaults
DESK = dict(hidden=64, layers=3, K=20, Kb=20)


def small_corpus(n=16, seed=1, fov_m=200.0, W=None):
    """``n`` hierarchical patches from one synthetic city."""
    city = generate_city(CityConfig(size_m=max(1000.0, 5 * fov_m), seed=seed))
    cfg = PatchConfig(fov_m=fov_m, max_local_W=W or (8 if fov_m <= 200 else 16), seed=seed)
    items, _ = preprocess_map(city.graph, cfg, n)
    return [h for *_, h in items]


def load_split(root: Path, split: str):
    return [mm.load(f) for f in sorted((root / split).glob("*.json"))]


def big_corpus(n_cities=10, per_city=100, seed=7):
    root = WORK / f"corpus_{n_cities}x{per_city}_{seed}"
    if not (root / "stats.json").exists():
        corpus(CityConfig(seed=seed), n_cities, PatchConfig(seed=seed), per_city, root)
    return load_split(root, "train"), load_split(root, "val")


def degree_l1(samples, reference, max_deg=8):
    def hist(gs):
        d = np.concatenate([g.degrees() for g in gs])
        h = np.bincount(np.minimum(d, max_deg), minlength=max_deg + 1).astype(float)
        return h / h.sum()

    return float(np.abs(hist(samples) - hist(reference)).sum())


# ---------------------------------------------------------------- overfit (criterion 4)

def full_loss(kind, model, data):
    """Teacher-forced loss over every step of every map."""
    fov = data[0].fov_m
    if kind == "seqgen":
        return bl.seq_evaluate(model, [bl.map_to_sequence(h, fov) for h in data])["loss"]
    if kind == "plaingen":
        ex = bl.plain_examples(data, fov, model.meta.get("seed", 0))
    else:
        ex = [hg.example_from_hier(hg.normalize_hier(h, fov)) for h in data]
    return hg.evaluate(model, ex)["loss"]


def overfit(kind, variant=None, data=None, epochs=500, seed=0, plain_steps=8):
    """Train on ``data`` and return (model, history, reduction of the full loss from init)."""
    data = data if data is not None else small_corpus()
    if kind == "seqgen":
        cfg = bl.SeqTrainConfig(epochs=epochs, batch_size=4, lr=5e-3, seed=seed, hidden=64, layers=1, K=20)
        fn = bl.seqgen_train
    else:
        # plaingen sees every control point as a step; a random subset per map keeps epochs cheap
        cfg = hg.TrainConfig(variant, epochs=epochs, batch_size=4, lr=5e-3, seed=seed,
                             steps_per_map=plain_steps if kind == "plaingen" else None, **DESK)
        fn = bl.plaingen_train if kind == "plaingen" else hg.train
    init, _ = fn(data, replace(cfg, epochs=0))
    model, hist = fn(data, cfg)
    for m in (init, model):
        m.meta["seed"] = seed
    first, last = full_loss(kind, init, data), full_loss(kind, model, data)
    # losses can go negative (continuous densities), so the reduction is relative to the initial magnitude
    return model, hist, (first - last) / abs(first)


# tau -> 0 as a limit: mixture components are still drawn by weight, only the spread vanishes.
# tau = 0 exactly takes the argmax component at every step, a different (and loop-prone) decoder.
COLD_TAU = 0.01


def cold_samples(model, n=32, tau=COLD_TAU, seed=0):
    out = []
    for i in range(n):
        out.append(mm.flatten(hg.sample(model, tau, rng=np.random.default_rng([seed, i]))))
    return out


# ---------------------------------------------------------------- ablation + fidelity (criteria 5, 6)

@dataclass
class AblationPlan:
    seeds: tuple = (0, 1, 2)
    epochs: int = 12
    lr: float = 2e-3
    batch_size: int = 16
    plain_steps: int = 16
    seq_epochs: int = 12
    n_samples: int = 64
    tau: float = 0.2
    extra: dict = field(default_factory=dict)


def run_seed(train, val, plan: AblationPlan, seed: int, log=print):
    t0 = time.time()
    res = {"seed": seed, "val": {}, "fidelity": {}, "seconds": {}}
    models = {}
    for var in hg.VARIANTS:
        cfg = hg.TrainConfig(var, epochs=plan.epochs, batch_size=plan.batch_size, lr=plan.lr, seed=seed, **DESK)
        t = time.time()
        m, _ = hg.train(train, cfg)
        models[var] = m
        vex = [hg.example_from_hier(hg.normalize_hier(h, m.cfg.fov_m)) for h in val]
        ev = hg.evaluate(m, vex)
        res["val"][var] = {"coord_nll": ev["coord_nll"], "topo_bce": ev["topo_bce"]}
        res["seconds"][var] = time.time() - t
        log(f"seed {seed} {var}: {res['val'][var]} ({res['seconds'][var]:.0f}s)")
    t = time.time()
    cfg = hg.TrainConfig("coordinate_first", epochs=plan.epochs, batch_size=plan.batch_size, lr=plan.lr, seed=seed,
                         steps_per_map=plan.plain_steps, **DESK)
    pm, _ = bl.plaingen_train(train, cfg)
    res["seconds"]["plaingen"] = time.time() - t
    t = time.time()
    scfg = bl.SeqTrainConfig(epochs=plan.seq_epochs, batch_size=plan.batch_size, lr=plan.lr, seed=seed,
                             hidden=DESK["hidden"], layers=1, K=20)
    sm, _ = bl.seqgen_train(train, scfg)
    res["seconds"]["seqgen"] = time.time() - t
    ref = [mm.flatten(h) for h in val]
    fov = val[0].fov_m
    samplers = {
        "hdmapgen": lambda r: mm.flatten(hg.sample(models["coordinate_first"], plan.tau, rng=r)),
        "plaingen": lambda r: bl.plaingen_sample(pm, plan.tau, rng=r),
        "seqgen": lambda r: bl.seqgen_sample(sm, plan.tau, rng=r),
    }
    sig = metrics.median_sigma([metrics.degree_hist(g) for g in ref])
    for name, fn in samplers.items():
        gs = [fn(np.random.default_rng([seed, 100, i])) for i in range(plan.n_samples)]
        gs_ok = [g for g in gs if g.n_nodes > 0]
        dh = [metrics.degree_hist(g) for g in gs_ok]
        res["fidelity"][name] = {
            "mmd_degree": metrics.mmd(dh, [metrics.degree_hist(g) for g in ref], sig) if dh else float("inf"),
            "dead_end_rate": metrics.dead_end_rate(gs_ok, fov) if gs_ok else 0.0,
            "empty": len(gs) - len(gs_ok),
        }
        log(f"seed {seed} {name}: {res['fidelity'][name]}")
    res["seconds"]["total"] = time.time() - t0
    res["models"] = models
    res["plaingen"], res["seqgen"] = pm, sm
    return res


def summarize(results):
    med = lambda xs: float(np.median(xs))
    out = {"val": {}, "fidelity": {}}
    for var in hg.VARIANTS:
        out["val"][var] = {k: med([r["val"][var][k] for r in results]) for k in ("coord_nll", "topo_bce")}
    for name in ("hdmapgen", "plaingen", "seqgen"):
        out["fidelity"][name] = {k: med([r["fidelity"][name][k] for r in results])
                                 for k in ("mmd_degree", "dead_end_rate")}
    return out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("what", choices=["ablation"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=AblationPlan.epochs)
    ap.add_argument("--lr", type=float, default=AblationPlan.lr)
    ap.add_argument("--out")
    a = ap.parse_args(argv)
    train, val = big_corpus()
    plan = AblationPlan(seeds=tuple(a.seeds), epochs=a.epochs, seq_epochs=a.epochs, lr=a.lr)
    rs = [run_seed(train, val, plan, s) for s in plan.seeds]
    summ = summarize(rs)
    print(json.dumps(summ, indent=1))
    if a.out:
        slim = [{k: v for k, v in r.items() if k in ("seed", "val", "fidelity", "seconds")} for r in rs]
        Path(a.out).write_text(json.dumps({"runs": slim, "summary": summ}, indent=1))


if __name__ == "__main__":
    main()
