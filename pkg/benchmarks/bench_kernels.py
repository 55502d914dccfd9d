"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--json out.json]

Each kernel is timed on both paths over identical inputs (best of N after one
warmup call, so numba compilation is excluded) and the outputs are compared.
"""
from __future__ import annotations

import argparse
import json
import platform
import time

import numpy as np

from lanegraph import _kernels as K


def _best(fn, args, repeats):
    fn(*args)
    ts = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        ts.append(time.perf_counter() - t)
    return min(ts)


def cases(rng):
    vals = rng.normal(size=(20000, 128))
    idx = rng.integers(0, 2000, size=20000)
    A, B = rng.uniform(size=(1500, 2)), rng.uniform(size=(1500, 2))
    t = np.linspace(0, 6 * np.pi, 3000)
    P = np.c_[t * 10, 30 * np.sin(t)] + rng.normal(scale=0.01, size=(3000, 2))
    HA = rng.dirichlet(np.ones(200), size=64)
    HB = rng.dirichlet(np.ones(200), size=64)
    return {
        "scatter_add_rows": ((vals, idx, 2000), K.scatter_add_rows_np, getattr(K, "scatter_add_rows_nb", None)),
        "min_sq_dists": ((A, B), K.min_sq_dists_np, getattr(K, "min_sq_dists_nb", None)),
        "decimate_keep": ((P, 0.04), K.decimate_keep_np, getattr(K, "decimate_keep_nb", None)),
        "w1_pairwise": ((HA, HB, 0.01), K.w1_pairwise_np, getattr(K, "w1_pairwise_nb", None)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json")
    a = ap.parse_args(argv)
    rows = {}
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}  agree")
    for name, (args, f_np, f_nb) in cases(np.random.default_rng(a.seed)).items():
        t_np = _best(f_np, args, a.repeats)
        if f_nb is None:
            rows[name] = {"numpy_s": t_np}
            print(f"{name:<18}{t_np * 1e3:>12.2f}{'n/a':>12}")
            continue
        t_nb = _best(f_nb, args, a.repeats)
        same = bool(np.allclose(f_np(*args), f_nb(*args), rtol=1e-12, atol=1e-12))
        rows[name] = {"numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "agree": same}
        print(f"{name:<18}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>8.1f}x  {same}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump({"python": platform.python_version(), "kernels": rows}, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
