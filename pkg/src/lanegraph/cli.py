"""Command-line entry point: synth, preprocess, train, sample, eval, render, bench.

Exit codes: 0 success, 2 invalid flags or inputs, 1 internal error.
``--jobs`` bounds the BLAS thread pools for the whole command.
Config precedence: flags > ``--config`` TOML file > defaults. The seed falls
back to ``LANEGRAPH_SEED`` when neither a flag nor the config sets it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from . import map_model as mm


class UsageError(Exception):
    """Bad flags or unusable inputs; maps to exit code 2."""


# ---------------------------------------------------------------- config / manifest

DEFAULTS = {
    "synth": {"size": 1000.0, "block": 120.0, "n_cities": 4, "jitter": 0.12, "curve_prob": 0.8,
              "light_prob": 0.5},
    "preprocess": {"fov": 200.0, "n": 100, "w": None, "curvature_tol": None, "val_fraction": 0.1},
    "train": {"model": "hdmapgen", "variant": "coordinate_first", "epochs": 10, "batch_size": 16, "lr": 1e-4,
              "hidden": 128, "layers": 7, "rounds": 1, "K": 20, "Kb": 20, "steps_per_map": None},
    "sample": {"n": 16, "tau": 0.2, "max_nodes": None},
    "eval": {"radius": 20.0, "probes": 32, "bins": 200},
    "render": {"width": 800},
    "bench": {"n": 5, "repeats": 3, "tau": 0.2},
}


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        import tomllib as toml  # type: ignore[import-not-found]
    except ImportError:
        import tomli as toml
    try:
        return toml.loads(p.read_text())
    except Exception as e:
        raise UsageError(f"cannot parse config {path}: {e}") from e


def resolve(args, command: str) -> dict:
    """Merge flags over config file over defaults for ``command``."""
    cfg = _load_config(getattr(args, "config", None))
    file_vals = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    file_vals.update(cfg.get(command, {}))
    out = dict(DEFAULTS.get(command, {}))
    for k, v in file_vals.items():
        out[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if k in ("func", "config", "command"):
            continue
        if v is not None:
            out[k] = v
        else:
            out.setdefault(k, None)
    if out.get("seed") is None:
        env = os.environ.get("LANEGRAPH_SEED")
        try:
            out["seed"] = int(env) if env is not None else 0
        except ValueError as e:
            raise UsageError(f"LANEGRAPH_SEED must be an integer, got {env!r}") from e
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _artifact_hashes(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != "manifest.json" and not f.name.endswith(".manifest.json"):
                    out[str(f)] = _sha256(f)
        elif p.is_file():
            out[str(p)] = _sha256(p)
    return out


def write_manifest(command, cfg, inputs, outputs, t0, target: Path):
    """RunManifest: one per run, next to its outputs."""
    man = {
        "command": command,
        "config": {k: v for k, v in cfg.items() if _jsonable(v)},
        "seed": cfg.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifacts": _artifact_hashes(outputs),
        "wall_time_s": round(time.time() - t0, 3),
        "version": __version__,
        "python": platform.python_version(),
        "numba": os.environ.get("LANEGRAPH_NUMBA", "1"),
    }
    target.write_text(json.dumps(man, indent=1, sort_keys=True))


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _need_positive(cfg, *names):
    for n in names:
        if cfg.get(n) is not None and cfg[n] <= 0:
            raise UsageError(f"--{n.replace('_', '-')} must be positive")


def _list_maps(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise UsageError(f"no such file or directory: {path}")
    files = sorted(f for f in p.glob("*.json") if f.name not in ("stats.json", "manifest.json")
                   and not f.name.endswith(".manifest.json"))
    return files


def _load_dir(path) -> list:
    out = []
    for f in _list_maps(path):
        try:
            out.append(mm.load(f))
        except (ValueError, KeyError, json.JSONDecodeError) as e:
            raise UsageError(f"{f}: not a map file ({e})") from e
    return out


# ---------------------------------------------------------------- render

SVG_STYLE = (".lane{fill:none;stroke:#3a5f8f;stroke-width:1.5}"
             ".traffic-light{fill:none;stroke:#d9480f;stroke-width:2.5}"
             ".key{fill:#111}.ctrl{fill:#8aa5c8}"
             ".legend-tl{stroke:#d9480f;stroke-width:2.5}.legend-lane{stroke:#3a5f8f;stroke-width:1.5}"
             "text{font-family:sans-serif;font-size:11px;fill:#222}")


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def render_svg(graph, width: int = 800, fov_m: float | None = None, show_ctrl: bool = True) -> str:
    """SVG 1.1 text for a HierGraph or PlainGraph in patch-frame meters."""
    mm.check(graph)
    hier = isinstance(graph, mm.HierGraph)
    fov = fov_m or graph.fov_m
    if not fov:
        pts = graph.global_nodes if hier else graph.nodes
        fov = float(max(1.0, np.max(pts))) if len(pts) else 1.0
    margin = 30
    s = width / fov
    H = width + 2 * margin + 40
    W = width + 2 * margin
    X = lambda x: _fmt(margin + x * s)
    Y = lambda y: _fmt(margin + (fov - y) * s)
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f"<style>{SVG_STYLE}</style>",
        f'<defs><clipPath id="fov"><rect x="{margin}" y="{margin}" width="{width}" height="{width}"/>'
        "</clipPath></defs>",
        f'<rect x="{margin}" y="{margin}" width="{width}" height="{width}" fill="#fafafa" stroke="#bbb"/>',
        '<g clip-path="url(#fov)">',
    ]
    lanes = []  # (points, traffic_light)
    dots_key, dots_ctrl = [], []
    if hier:
        for a, b in graph.edge_list():
            pts = [graph.global_nodes[a]]
            if (a, b) in graph.local_paths:
                c, m = graph.local_paths[(a, b)]
                pts += list(c[m])
                dots_ctrl += list(c[m])
            pts.append(graph.global_nodes[b])
            lanes.append((np.array(pts), graph.semantics.get((a, b), False)))
        dots_key = list(graph.global_nodes)
    else:
        for lane in mm._lanes_for(graph):
            lanes.append((graph.nodes[lane["path"]], lane["traffic_light"]))
        deg = graph.degrees()
        dots_key = list(graph.nodes[deg != 2])
        dots_ctrl = list(graph.nodes[deg == 2])
    for pts, tl in lanes:
        d = " ".join(f"{X(x)},{Y(y)}" for x, y in pts)
        out.append(f'<polyline class="{"traffic-light" if tl else "lane"}" points="{d}"/>')
    if show_ctrl:
        for x, y in dots_ctrl:
            out.append(f'<circle class="ctrl" cx="{X(x)}" cy="{Y(y)}" r="1.5"/>')
    for x, y in dots_key:
        out.append(f'<circle class="key" cx="{X(x)}" cy="{Y(y)}" r="3"/>')
    out.append("</g>")
    # legend and scale bar
    ly = margin + width + 20
    bar_m = 10 ** np.floor(np.log10(fov / 4))
    out += [
        f'<line class="legend-lane" x1="{margin}" y1="{ly}" x2="{margin + 20}" y2="{ly}"/>',
        f'<text x="{margin + 25}" y="{ly + 4}">lane</text>',
        f'<line class="legend-tl" x1="{margin + 70}" y1="{ly}" x2="{margin + 90}" y2="{ly}"/>',
        f'<text x="{margin + 95}" y="{ly + 4}">traffic light</text>',
        f'<circle class="key" cx="{margin + 185}" cy="{ly}" r="3"/>',
        f'<text x="{margin + 192}" y="{ly + 4}">key point</text>',
        f'<line x1="{_fmt(W - margin - bar_m * s)}" y1="{ly}" x2="{W - margin}" y2="{ly}" stroke="#222" '
        f'stroke-width="2"/>',
        f'<text x="{_fmt(W - margin - bar_m * s)}" y="{ly - 5}">{escape(f"{bar_m:g} m")}</text>',
        f'<text x="{margin}" y="{margin - 10}">{escape(f"fov {fov:g} m")}</text>',
        "</svg>",
    ]
    return "\n".join(out) + "\n"


def render(graph, out_path, width: int = 800, fov_m: float | None = None):
    Path(out_path).write_text(render_svg(graph, width, fov_m))


# ---------------------------------------------------------------- model loading

def load_model(path):
    from .nn.params import load_checkpoint
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        _, meta, _, _ = load_checkpoint(p)
    except Exception as e:
        raise UsageError(f"{path}: unreadable checkpoint ({e})") from e
    if meta.get("kind") == "seqgen":
        from .baselines import SeqModel
        return SeqModel.load(p)[0]
    from .hdmapgen import Model
    return Model.load(p)[0]


def sample_one(model, tau: float, rng, max_nodes=None):
    """One map from any model kind; returns (graph, info)."""
    kind = model.meta.get("kind", "hdmapgen")
    if kind == "seqgen":
        from .baselines import seqgen_sample
        return seqgen_sample(model, tau, max_nodes, rng, return_info=True)
    if kind == "plaingen":
        from .baselines import plaingen_sample
        return plaingen_sample(model, tau, max_nodes, rng, return_info=True)
    from .hdmapgen import sample
    return sample(model, tau, max_nodes, rng, return_info=True)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = resolve(args, "synth")
    if cfg.get("out") is None:
        raise UsageError("--out is required")
    _need_positive(cfg, "size", "block", "n_cities")
    from .synth_data import CityConfig, city_seed, generate_city
    try:
        base = CityConfig(size_m=float(cfg["size"]), block_m=float(cfg["block"]), jitter=float(cfg["jitter"]),
                          curve_prob=float(cfg["curve_prob"]), light_prob=float(cfg["light_prob"]),
                          seed=int(cfg["seed"]))
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(cfg["out"])
    t0 = time.time()
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(int(cfg["n_cities"])):
        c = generate_city(CityConfig(**{**asdict(base), "seed": city_seed(base.seed, k)}))
        f = out / f"city_{k:03d}.json"
        mm.save(c.graph, f)
        files.append(f)
    write_manifest("synth", cfg, [], [out], t0, _manifest_path(out))
    return 0


def cmd_preprocess(args):
    cfg = resolve(args, "preprocess")
    if cfg.get("input") is None or cfg.get("out") is None:
        raise UsageError("--in and --out are required")
    _need_positive(cfg, "fov", "n", "w")
    from .preprocess import DEFAULT_CURVATURE_TOL, PatchConfig, PatchStats, default_w, preprocess_map
    from .synth_data import city_seed, split_of
    maps = _list_maps(cfg["input"])
    if not maps:
        raise UsageError(f"no map files under {cfg['input']}")
    fov = float(cfg["fov"])
    W = int(cfg["w"]) if cfg.get("w") else default_w(fov)
    tol = float(cfg["curvature_tol"]) if cfg.get("curvature_tol") is not None else DEFAULT_CURVATURE_TOL
    try:
        PatchConfig(fov, W, tol, int(cfg["seed"]))
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(cfg["out"])
    t0 = time.time()
    for s in ("train", "val"):
        (out / s).mkdir(parents=True, exist_ok=True)
    stats = PatchStats()
    counts = {"train": 0, "val": 0}
    for k, f in enumerate(maps):
        g = mm.load_plain(f)
        pc = PatchConfig(fov, W, tol, seed=city_seed(int(cfg["seed"]), k))
        try:
            items, _ = preprocess_map(g, pc, int(cfg["n"]), stats)
        except ValueError as e:
            raise UsageError(f"{f}: {e}") from e
        for j, (_, _, _, h) in enumerate(items):
            split = split_of(f"{k}:{j}", float(cfg["val_fraction"]))
            mm.save(h, out / split / f"patch_{k:03d}_{j:05d}.json")
            counts[split] += 1
    summary = stats.summary()
    summary["splits"] = counts
    summary["fov_m"], summary["W"], summary["curvature_tol"] = fov, W, tol
    (out / "stats.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_manifest("preprocess", cfg, maps, [out], t0, _manifest_path(out))
    return 0


def _load_corpus(path) -> list:
    """Maps in ``path``, or in ``path/train`` for a preprocessed corpus."""
    p = Path(path)
    return _load_dir(p / "train") if (p / "train").is_dir() else _load_dir(p)


def _train_sets(data):
    d = Path(data)
    if not d.exists():
        raise UsageError(f"--data {data} does not exist")
    tr = _load_dir(d / "train") if (d / "train").is_dir() else _load_dir(d)
    va = _load_dir(d / "val") if (d / "val").is_dir() else []
    tr = [h for h in tr if isinstance(h, mm.HierGraph)]
    va = [h for h in va if isinstance(h, mm.HierGraph)]
    if not tr:
        raise UsageError(f"no hierarchical training maps under {data}")
    return tr, va


def cmd_train(args):
    cfg = resolve(args, "train")
    if cfg.get("data") is None:
        raise UsageError("--data is required")
    if cfg.get("out") is None:
        raise UsageError("--out is required")
    _need_positive(cfg, "batch_size", "lr", "hidden", "layers", "rounds", "K", "Kb", "steps_per_map")
    if cfg["epochs"] < 0:
        raise UsageError("--epochs must be >= 0")
    model_kind = cfg["model"]
    if model_kind not in ("hdmapgen", "plaingen", "seqgen"):
        raise UsageError(f"unknown --model {model_kind}")
    from . import baselines as bl
    from . import hdmapgen as hg
    if model_kind != "seqgen" and cfg["variant"] not in hg.VARIANTS:
        raise UsageError(f"unknown --variant {cfg['variant']}")
    tr, va = _train_sets(cfg["data"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    report = out.with_name(out.name + ".report.jsonl")
    t0 = time.time()
    fov = tr[0].fov_m or 200.0
    if model_kind == "seqgen":
        tc = bl.SeqTrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                               seed=int(cfg["seed"]), hidden=int(cfg["hidden"]), layers=int(cfg["layers"]),
                               K=int(cfg["K"]))
        model, _ = bl.seqgen_train(tr, tc, val=va, report=report, fov_m=fov)
    else:
        try:
            tc = hg.TrainConfig(variant=cfg["variant"], rounds=int(cfg["rounds"]), layers=int(cfg["layers"]),
                                epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                                seed=int(cfg["seed"]), hidden=int(cfg["hidden"]), K=int(cfg["K"]),
                                Kb=int(cfg["Kb"]), steps_per_map=cfg.get("steps_per_map"))
        except ValueError as e:
            raise UsageError(str(e)) from e
        if model_kind == "plaingen":
            if tc.variant == "independent":
                raise UsageError("plaingen supports topology_first and coordinate_first")
            model, _ = bl.plaingen_train(tr, tc, val=va, report=report, fov_m=fov)
        else:
            model, _ = hg.train(tr, tc, val=va, report=report, fov_m=fov)
    model.save(out, optimizer=getattr(model, "_optimizer", None),
               rng=np.random.default_rng([int(cfg["seed"]), 11]))
    write_manifest("train", cfg, [cfg["data"]], [out, report], t0, _manifest_path(out))
    return 0


def cmd_sample(args):
    cfg = resolve(args, "sample")
    if cfg.get("ckpt") is None or cfg.get("out") is None:
        raise UsageError("--ckpt and --out are required")
    _need_positive(cfg, "n", "max_nodes")
    if cfg["tau"] < 0:
        raise UsageError("--tau must be >= 0")
    model = load_model(cfg["ckpt"])
    out = Path(cfg["out"])
    t0 = time.time()
    out.mkdir(parents=True, exist_ok=True)
    infos = []
    for i in range(int(cfg["n"])):
        rng = np.random.default_rng([int(cfg["seed"]), i])
        g, info = sample_one(model, float(cfg["tau"]), rng, cfg.get("max_nodes"))
        mm.save(g, out / f"sample_{i:04d}.json")
        infos.append({"index": i, **{k: v for k, v in info.items() if _jsonable(v)}})
    (out / "samples.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in infos))
    write_manifest("sample", cfg, [cfg["ckpt"]], [out], t0, _manifest_path(out))
    return 0


def _as_plain(maps):
    return [mm.flatten(m) if isinstance(m, mm.HierGraph) else m for m in maps]


def cmd_eval(args):
    cfg = resolve(args, "eval")
    if cfg.get("samples") is None or cfg.get("reference") is None or cfg.get("out") is None:
        raise UsageError("--samples, --reference and --out are required")
    _need_positive(cfg, "radius", "probes", "bins")
    from .metrics import evaluate_sets
    S = _as_plain(_load_corpus(cfg["samples"]))
    R = _as_plain(_load_corpus(cfg["reference"]))
    if not S or not R:
        raise UsageError("no maps found in --samples or --reference")
    t0 = time.time()
    rep = evaluate_sets(S, R, seed=int(cfg["seed"]), region_radius=float(cfg["radius"]),
                        n_probes=int(cfg["probes"]), bins=int(cfg["bins"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    write_manifest("eval", cfg, [cfg["samples"], cfg["reference"]], [out], t0, _manifest_path(out))
    return 0


def cmd_render(args):
    cfg = resolve(args, "render")
    if cfg.get("input") is None or cfg.get("out") is None:
        raise UsageError("--in and --out are required")
    _need_positive(cfg, "width")
    p = Path(cfg["input"])
    if not p.is_file():
        raise UsageError(f"no such map file: {p}")
    try:
        g = mm.load(p)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"{p}: not a map file ({e})") from e
    problems = mm.validate(g)
    if problems:
        raise UsageError(f"{p}: invalid map: {'; '.join(problems)}")
    t0 = time.time()
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    render(g, out, int(cfg["width"]))
    write_manifest("render", cfg, [p], [out], t0, _manifest_path(out))
    return 0


def cmd_bench(args):
    cfg = resolve(args, "bench")
    if not cfg.get("ckpt") or cfg.get("out") is None:
        raise UsageError("at least one --ckpt and --out are required")
    _need_positive(cfg, "n", "repeats")
    from .metrics import latency_bench
    models = [(c, load_model(c)) for c in cfg["ckpt"]]
    t0 = time.time()
    res = {}
    for path, m in models:
        fn = lambda rng, m=m: sample_one(m, float(cfg["tau"]), rng)
        r = latency_bench(fn, int(cfg["n"]), repeats=int(cfg["repeats"]), seed=int(cfg["seed"]))
        res[str(path)] = {"kind": m.meta.get("kind", "hdmapgen"), **r}
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"latency": res, "threads": 1}, indent=1, sort_keys=True))
    write_manifest("bench", cfg, cfg["ckpt"], [out], t0, _manifest_path(out))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanegraph", description="Hierarchical lane-map generation toolkit.")
    p.add_argument("--version", action="version", version=f"lanegraph {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML file; keys at top level or under a [command] table")
        sp.add_argument("--seed", type=int, help="global seed (falls back to LANEGRAPH_SEED, then 0)")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--jobs", type=int, help="upper bound on worker threads (BLAS pools)")

    s = sub.add_parser("synth", help="generate synthetic city maps")
    common(s)
    s.add_argument("--size", type=float)
    s.add_argument("--block", type=float)
    s.add_argument("--n-cities", dest="n_cities", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("--curve-prob", dest="curve_prob", type=float)
    s.add_argument("--light-prob", dest="light_prob", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="sample patches and build hierarchical graphs")
    common(s)
    s.add_argument("--in", dest="input", help="map JSON file or directory of maps")
    s.add_argument("--fov", type=float)
    s.add_argument("--n", type=int, help="patches per map")
    s.add_argument("--w", type=int, help="max local path width")
    s.add_argument("--curvature-tol", dest="curvature_tol", type=float)
    s.add_argument("--val-fraction", dest="val_fraction", type=float)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a generator")
    common(s)
    s.add_argument("--data")
    s.add_argument("--model", choices=["hdmapgen", "plaingen", "seqgen"])
    s.add_argument("--variant")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--hidden", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--rounds", type=int)
    s.add_argument("--K", type=int)
    s.add_argument("--Kb", type=int)
    s.add_argument("--steps-per-map", dest="steps_per_map", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw maps from a checkpoint")
    common(s)
    s.add_argument("--ckpt")
    s.add_argument("--n", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--max-nodes", dest="max_nodes", type=int)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="compare samples with reference maps")
    common(s)
    s.add_argument("--samples")
    s.add_argument("--reference")
    s.add_argument("--radius", type=float)
    s.add_argument("--probes", type=int)
    s.add_argument("--bins", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render a map as SVG")
    common(s)
    s.add_argument("--in", dest="input")
    s.add_argument("--width", type=int)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("bench", help="per-map generation latency")
    common(s)
    s.add_argument("--ckpt", action="append")
    s.add_argument("--n", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--tau", type=float)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        jobs = resolve(args, args.command).get("jobs")
        if jobs is None:
            return int(args.func(args) or 0)
        if jobs <= 0:
            raise UsageError("--jobs must be positive")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(int(jobs)):
            return int(args.func(args) or 0)
    except (UsageError, mm.ValidationError) as e:
        print(f"lanegraph {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"lanegraph {args.command}: internal error: {e}", file=sys.stderr)
        if os.environ.get("LANEGRAPH_DEBUG"):
            traceback.print_exc()
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
