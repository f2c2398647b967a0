"""Binary checkpoints: one JSON header line, then raw little-endian float32 payloads.

The header carries the full config, counters, RNG states, loader cursor,
slot bookkeeping and the float64 GradNorm controller state; the manifest lists
every payload tensor with its shape, dtype and byte offset relative to the
first payload byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import CmmConfig
from .gradnorm import GradNormState
from .net import ModelParams
from .train import Loader, Trainer

MAGIC = "CMM1"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def data_digest(X: np.ndarray, Y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(Y, dtype="<i8").tobytes())
    return h.hexdigest()


def _payloads(tr: Trainer) -> list[tuple[str, np.ndarray]]:
    items = []
    for name, p in tr.params:
        items.append((f"param/{name}", p.data))
    for name, _ in tr.params:
        items.append((f"ema/{name}", tr.ema[name]))
    for name in sorted(tr.opt.m):
        items.append((f"opt_m/{name}", tr.opt.m[name]))
        items.append((f"opt_v/{name}", tr.opt.v[name]))
    items.append(("carry/z_H", tr.slots.z_H))
    items.append(("carry/z_L", tr.slots.z_L))
    return items


def save(tr: Trainer, path: str | Path, extra: dict | None = None) -> None:
    """Write a checkpoint at an optimizer-step boundary (atomically)."""
    if tr.seg_since_step:
        raise CheckpointError("checkpoints are only taken at optimizer-step boundaries")
    if tr.cfg.dtype != "float32":
        raise CheckpointError("checkpoint payloads are float32; float64 models cannot be saved")
    manifest, blobs, off = [], [], 0
    for name, arr in _payloads(tr):
        b = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": off, "nbytes": len(b)})
        blobs.append(b)
        off += len(b)
    s = tr.slots
    header = {
        "magic": MAGIC,
        "config": tr.cfg.to_dict(),
        "seed": tr.cfg.seed,
        "step": tr.step,
        "segments": tr.segments,
        "inner_k": tr.inner_k,
        "threads": os.environ.get("CMM_THREADS"),
        "loader": tr.loader.state(),
        "data_digest": data_digest(tr.X, tr.Y),
        "slots": {
            "m": s.m.tolist(),
            "m_min": s.m_min.tolist(),
            "halted": s.halted.tolist(),
            "sample": s.sample.tolist(),
            "rngs": [r.bit_generator.state for r in s.rngs],
        },
        "act_rng": tr.act_rng.bit_generator.state,
        "probe_rng": tr.probe_rng.bit_generator.state,
        "opt": {"step": tr.opt.step, "skipped": tr.opt.skipped},
        "gradnorm": None if tr.gradnorm is None else tr.gradnorm.to_dict(),
        "last_eval": tr.last_eval,
        "extra": extra or {},
        "manifest": manifest,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, tensors)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad header: {e}") from e
    if header.get("magic") != MAGIC:
        raise CheckpointError(f"bad magic {header.get('magic')!r}")
    body = memoryview(raw)[nl + 1:]
    tensors, expect = {}, 0
    for ent in header["manifest"]:
        if ent["offset"] != expect:
            raise CheckpointError(f"manifest gap or overlap at {ent['name']}")
        n = int(np.prod(ent["shape"], dtype=np.int64)) * 4
        if n != ent["nbytes"] or ent["offset"] + n > len(body):
            raise CheckpointError(f"truncated payload for {ent['name']}")
        arr = np.frombuffer(body[ent["offset"]:ent["offset"] + n], dtype=_LE_F32).reshape(ent["shape"])
        tensors[ent["name"]] = arr.astype(np.float32)
        expect += n
    if expect != len(body):
        raise CheckpointError("trailing bytes after last payload")
    return header, tensors


def load_params(path: str | Path, which: str = "ema") -> ModelParams:
    """Model parameters (EMA by default) without rebuilding a trainer."""
    header, tensors = read(path)
    cfg = CmmConfig.from_dict(header["config"])
    pre = which + "/"
    return ModelParams(
        cfg, {k[len(pre):]: Tensor(v, requires_grad=True, name=k[len(pre):]) for k, v in tensors.items() if k.startswith(pre)}
    )


def load(path: str | Path, X: np.ndarray, Y: np.ndarray) -> Trainer:
    """Rebuild a trainer that continues exactly where the saved one stopped."""
    header, tensors = read(path)
    cfg = CmmConfig.from_dict(header["config"])
    if data_digest(np.asarray(X), np.asarray(Y)) != header["data_digest"]:
        raise CheckpointError("training data differs from the data the checkpoint was trained on")
    params = load_params(path, "param")
    tr = Trainer(cfg, X, Y, params=params)
    tr.ema = {k[4:]: v for k, v in tensors.items() if k.startswith("ema/")}
    tr.opt.m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt_m/")}
    tr.opt.v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt_v/")}
    tr.opt.step = header["opt"]["step"]
    tr.opt.skipped = header["opt"]["skipped"]
    s, sh = tr.slots, header["slots"]
    s.z_H[...] = tensors["carry/z_H"]
    s.z_L[...] = tensors["carry/z_L"]
    s.m[...] = sh["m"]
    s.m_min[...] = sh["m_min"]
    s.halted[...] = sh["halted"]
    s.sample[...] = sh["sample"]
    for r, st in zip(s.rngs, sh["rngs"]):
        r.bit_generator.state = st
    tr.act_rng.bit_generator.state = header["act_rng"]
    tr.probe_rng.bit_generator.state = header["probe_rng"]
    tr.loader = Loader(len(tr.X), cfg.seed, header["loader"]["epoch"], header["loader"]["pos"])
    tr.step = header["step"]
    tr.segments = header["segments"]
    tr.inner_k = header["inner_k"]
    tr.gradnorm = None if header["gradnorm"] is None else GradNormState.from_dict(header["gradnorm"])
    tr.last_eval = header.get("last_eval")
    return tr


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
