"""Named parameter storage, Adam, and the checkpoint container."""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

CKPT_FORMAT = "lanegraph-ckpt"
CKPT_VERSION = 1
_ZIP_DATE = (2000, 1, 1, 0, 0, 0)


class ParamStore:
    """Ordered mapping name -> array. All arrays share one dtype."""

    def __init__(self, dtype=np.float32, seed: int = 0, version: str = "1"):
        self.arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.version = version

    def add(self, name: str, value) -> np.ndarray:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name}")
        self.arrays[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return self.arrays[name]

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def names(self):
        return list(self.arrays)

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype, self.seed, self.version)
        for k, v in self.arrays.items():
            out.add(k, v)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape if shape is not None else (fan_in, fan_out))


class Adam:
    """Adam with bias correction; defaults follow the published training setup."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm: float | None = 10.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: ParamStore, grads: dict) -> float:
        """Update in place; returns the pre-clip global gradient norm."""
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name, g in grads.items():
            p = params[name]
            g = g * scale if scale != 1.0 else g
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype)
        if not params.all_finite():
            raise FloatingPointError("non-finite parameter after optimizer step")
        return norm

    def state(self) -> tuple[dict, dict]:
        arrays = {}
        for k in self.m:
            arrays[f"adam.m/{k}"] = self.m[k]
            arrays[f"adam.v/{k}"] = self.v[k]
        meta = {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "clip_norm": self.clip_norm, "t": self.t}
        return arrays, meta

    def load_state(self, arrays: dict, meta: dict):
        self.lr, self.beta1, self.beta2, self.eps = meta["lr"], meta["beta1"], meta["beta2"], meta["eps"]
        self.clip_norm = meta["clip_norm"]
        self.t = meta["t"]
        self.m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")}


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, params: ParamStore, meta: dict | None = None, optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None) -> None:
    """Zip container: ``manifest.json`` plus one raw little-endian blob per array.

    Byte-identical for identical inputs (fixed member timestamps, sorted JSON).
    """
    arrays = OrderedDict((f"param/{k}", v) for k, v in params.items())
    opt_meta = None
    if optimizer is not None:
        oa, opt_meta = optimizer.state()
        arrays.update(oa)
    manifest = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "param_version": params.version,
        "seed": params.seed,
        "dtype": params.dtype.str,
        "arrays": {},
        "optimizer": opt_meta,
        "rng": rng.bit_generator.state if rng is not None else None,
        "meta": meta or {},
    }
    blobs = []
    for i, (name, a) in enumerate(arrays.items()):
        a = np.ascontiguousarray(a)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        member = f"arrays/{i:05d}.bin"
        manifest["arrays"][name] = {"shape": list(a.shape), "dtype": le.dtype.str, "file": member}
        blobs.append((member, le.tobytes()))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as z:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        z.writestr(info, json.dumps(manifest, sort_keys=True, indent=1, default=_json_default))
        for member, data in blobs:
            info = zipfile.ZipInfo(member, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            z.writestr(info, data)
    Path(path).write_bytes(buf.getvalue())


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(path):
    """Returns (params, meta, optimizer or None, rng or None)."""
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        if manifest.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path}: not a lanegraph checkpoint")
        if manifest["version"] > CKPT_VERSION:
            raise ValueError(f"{path}: checkpoint version {manifest['version']} is newer than supported")
        arrays = {}
        for name, spec in manifest["arrays"].items():
            raw = z.read(spec["file"])
            arrays[name] = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
    params = ParamStore(np.dtype(manifest["dtype"]).newbyteorder("="), manifest["seed"], manifest["param_version"])
    for name, a in arrays.items():
        if name.startswith("param/"):
            params.add(name[len("param/"):], a)
    opt = None
    if manifest.get("optimizer"):
        opt = Adam()
        opt.load_state({k: v for k, v in arrays.items() if k.startswith("adam.")}, manifest["optimizer"])
    rng = None
    if manifest.get("rng"):
        rng = np.random.default_rng()
        rng.bit_generator.state = manifest["rng"]
    return params, manifest["meta"], opt, rng
