"""Versioned single-file checkpoints.

Layout: 8-byte magic, little-endian u64 header length, a JSON header
(sorted keys) describing every array, then the raw little-endian array
bytes in header order. No timestamps are written, so identical training
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .model import EmbeddingTable, Hyperparams, VAEBMF
from .train import Adam, TrainState

MAGIC = b"CRVAECK\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_float(x: float):
    return x if math.isfinite(x) else repr(x)


def _decode_float(x) -> float:
    return float(x)


def write_container(path, meta: dict, arrays: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        blob = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        raw = np.frombuffer(data[lo:lo + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = raw.reshape(e["shape"]).astype(raw.dtype.newbyteorder("="))
    return header["meta"], arrays


def save(state: TrainState, path, extra: dict | None = None) -> None:
    arrays = {}
    for name, t in state.model.named_parameters().items():
        arrays[f"param/{name}"] = t.values
    arrays["table/user"] = state.user_table.matrix
    arrays["table/item"] = state.item_table.matrix
    for name in sorted(state.optimizer.m):
        arrays[f"adam_m/{name}"] = state.optimizer.m[name]
        arrays[f"adam_v/{name}"] = state.optimizer.v[name]
    for b, rows in enumerate(state.user_batches):
        arrays[f"batch/user/{b}"] = np.asarray(rows, dtype=np.int64)
    for b, rows in enumerate(state.item_batches):
        arrays[f"batch/item/{b}"] = np.asarray(rows, dtype=np.int64)
    if state.best is not None:
        for name in sorted(state.best):
            arrays[f"best/{name}"] = state.best[name]
    meta = {
        "hyperparams": state.hp.to_dict(),
        "n_users": state.model.n_users,
        "n_items": state.model.n_items,
        "iteration": state.iteration,
        "best_val_rmse": _encode_float(state.best_val_rmse),
        "best_iteration": state.best_iteration,
        "since_improvement": state.since_improvement,
        "adam_steps": dict(sorted(state.optimizer.t.items())),
        "rng_state": state.rng.bit_generator.state,
        "n_user_batches": len(state.user_batches),
        "n_item_batches": len(state.item_batches),
        "history": [[i, _encode_float(a), _encode_float(b)] for i, a, b in state.history],
        "extra": extra or {},
    }
    write_container(path, meta, arrays)


def load(path) -> TrainState:
    meta, arrays = read_container(path)
    hp = Hyperparams.from_dict(meta["hyperparams"])
    # parameter init draws are discarded; stored values overwrite them
    model = VAEBMF(hp, meta["n_users"], meta["n_items"], np.random.default_rng(0))
    for name, t in model.named_parameters().items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[key].shape != t.shape:
            raise CheckpointError(f"parameter {name}: shape {arrays[key].shape} != {t.shape}")
        t.values = arrays[key].copy()
    opt = Adam(hp.lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps)
    for name, steps in meta["adam_steps"].items():
        opt.m[name] = arrays[f"adam_m/{name}"].copy()
        opt.v[name] = arrays[f"adam_v/{name}"].copy()
        opt.t[name] = int(steps)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    best = None
    best_keys = [k for k in arrays if k.startswith("best/")]
    if best_keys:
        best = {k[len("best/"):]: arrays[k].copy() for k in best_keys}
    state = TrainState(
        hp=hp,
        model=model,
        user_table=EmbeddingTable("user", arrays["table/user"]),
        item_table=EmbeddingTable("item", arrays["table/item"]),
        optimizer=opt,
        rng=rng,
        user_batches=[arrays[f"batch/user/{b}"] for b in range(meta["n_user_batches"])],
        item_batches=[arrays[f"batch/item/{b}"] for b in range(meta["n_item_batches"])],
        iteration=meta["iteration"],
        best_val_rmse=_decode_float(meta["best_val_rmse"]),
        since_improvement=meta["since_improvement"],
        best_iteration=meta["best_iteration"],
        best=best,
        history=[(i, _decode_float(a), _decode_float(b)) for i, a, b in meta["history"]],
    )
    return state


def extra(path) -> dict:
    meta, _ = read_container(path)
    return meta.get("extra", {})
