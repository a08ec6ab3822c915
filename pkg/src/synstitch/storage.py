"""On-disk formats: raw float32 images, JSON documents and checkpoint containers."""

from __future__ import annotations

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch


def write_f32(path, array):
    """Raw little-endian float32, row-major, no header."""
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_f32(path, shape):
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} floats, found {arr.size}")
    return arr.reshape(shape)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def tensor_hash(tensors):
    """SHA-256 over the raw bytes of a name -> tensor mapping, in key order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def tree_hash(root, exclude=()):
    """Hash every file under ``root`` (relative path + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _flatten_optimizer(opt_state):
    flat, meta = {}, {"param_groups": opt_state["param_groups"], "state": {}}
    for idx, st in opt_state["state"].items():
        keys = []
        for k, v in st.items():
            if torch.is_tensor(v):
                flat[f"opt.{idx}.{k}"] = v
                keys.append(k)
        meta["state"][str(idx)] = keys
    return flat, meta


def _write_blob(path, tensors):
    index, offset = [], 0
    with open(path, "wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().contiguous().numpy()
            data = arr.tobytes()
            fh.write(data)
            index.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset})
            offset += len(data)
    return index


def _read_blob(path, index):
    raw = Path(path).read_bytes()
    out = {}
    for entry in index:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=entry["offset"]).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(ckpt_dir, module, meta, optimizer=None, generator=None, np_rng=None):
    """Write ``params.bin`` (+ ``optim.bin``) and ``meta.json``.

    ``meta.json`` carries the caller's metadata plus the blob index and RNG
    states, so a run can resume bit-for-bit.
    """
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta["params_index"] = _write_blob(ckpt_dir / "params.bin", module.state_dict())
    if optimizer is not None:
        flat, ometa = _flatten_optimizer(optimizer.state_dict())
        meta["optim_index"] = _write_blob(ckpt_dir / "optim.bin", flat)
        meta["optim_meta"] = ometa
    if generator is not None:
        meta["torch_rng"] = base64.b64encode(generator.get_state().numpy().tobytes()).decode()
    if np_rng is not None:
        meta["numpy_rng"] = np_rng.bit_generator.state
    write_json(ckpt_dir / "meta.json", _jsonable(meta))
    return ckpt_dir


def load_checkpoint(ckpt_dir, module=None, optimizer=None, generator=None, np_rng=None):
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "meta.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt_dir}")
    meta = read_json(ckpt_dir / "meta.json")
    if module is not None:
        module.load_state_dict(_read_blob(ckpt_dir / "params.bin", meta["params_index"]))
    if optimizer is not None and "optim_index" in meta:
        flat = _read_blob(ckpt_dir / "optim.bin", meta["optim_index"])
        ometa = meta["optim_meta"]
        state = {}
        for idx, keys in ometa["state"].items():
            state[int(idx)] = {k: flat[f"opt.{idx}.{k}"] for k in keys}
        optimizer.load_state_dict({"state": state, "param_groups": ometa["param_groups"]})
    if generator is not None and "torch_rng" in meta:
        raw = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8).copy()
        generator.set_state(torch.from_numpy(raw))
    if np_rng is not None and "numpy_rng" in meta:
        np_rng.bit_generator.state = meta["numpy_rng"]
    return meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, os.PathLike):
        return str(obj)
    return obj


def write_loss_csv(path, rows, header=("step", "loss")):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n")
