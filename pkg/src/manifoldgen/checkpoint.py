"""Checkpoint container: bit-exact round trip of every tensor plus metadata.

Layout: magic `GRMC`, u32 version, u64 JSON length, JSON metadata (config
snapshot, level schedule, iteration, step counts, tensor directory with
name/shape/offset), then the raw little-endian float32 tensor payloads in
directory order. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
import torch

from .config import EngineConfig, from_entries
from .diffcore import ParamStore
from .fields import LevelSchedule

MAGIC = b"GRMC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or malformed checkpoint file."""


def _store_tensors(prefix: str, store: ParamStore):
    for name, p in store.items():
        yield f"{prefix}/{name}", p.detach()
        yield f"{prefix}_m/{name}", store.adam_m[name]
        yield f"{prefix}_v/{name}", store.adam_v[name]


def save_checkpoint(path, config: EngineConfig, state, iteration: int) -> None:
    tensors = list(_store_tensors("g", state.g_store)) \
        + list(_store_tensors("d", state.d_store))
    directory = []
    offset = 0
    payloads = []
    for name, t in tensors:
        arr = t.detach().to(torch.float32).contiguous().numpy()
        raw = arr.astype("<f4", copy=False).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)

    meta = {
        "config": _config_snapshot(config),
        "iteration": iteration,
        "g_step_count": state.g_store.step_count,
        "d_step_count": state.d_store.step_count,
        "levels": list(state.gen.schedule.levels),
        "background_plane_depth": state.gen.schedule.background_plane_depth,
        "seed": config["seed"],
        "tensors": directory,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")

    dirname = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for raw in payloads:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config_snapshot(config: EngineConfig) -> dict:
    snap = {}
    for k, v in config.as_dict().items():
        snap[k] = list(v) if isinstance(v, tuple) else v
    return snap


def read_checkpoint(path) -> tuple[EngineConfig, dict, dict]:
    """Returns (config, metadata, tensors-by-name as float32 numpy arrays)."""
    try:
        with open(path, "rb") as f:
            head = f.read(4)
            if head != MAGIC:
                raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
            (version,) = struct.unpack("<I", f.read(4))
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            (meta_len,) = struct.unpack("<Q", f.read(8))
            meta = json.loads(f.read(meta_len).decode("utf-8"))
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint '{path}': {e}")

    raw_cfg = meta["config"]
    entries = {k: v for k, v in raw_cfg.items()}
    config = from_entries({k: _unparse(v) for k, v in entries.items()})

    tensors = {}
    for ent in meta["tensors"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n,
                            offset=ent["offset"]).reshape(ent["shape"])
        tensors[ent["name"]] = arr
    return config, meta, tensors


def _unparse(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return " ".join(repr(x) for x in v)
    return str(v)


def _load_store(prefix: str, store: ParamStore, tensors: dict) -> None:
    with torch.no_grad():
        for name, p in store.items():
            for tag, dest in ((f"{prefix}/{name}", p),
                              (f"{prefix}_m/{name}", store.adam_m[name]),
                              (f"{prefix}_v/{name}", store.adam_v[name])):
                if tag not in tensors:
                    raise CheckpointError(f"checkpoint is missing tensor '{tag}'")
                src = torch.from_numpy(tensors[tag].copy())
                if src.shape != dest.shape:
                    raise CheckpointError(
                        f"tensor '{tag}' has shape {tuple(src.shape)}, "
                        f"expected {tuple(dest.shape)}")
                dest.copy_(src)


def load_checkpoint(path):
    """Rebuilds the full training state recorded in a checkpoint file."""
    from .gan import Discriminator, TrainState
    from .model import build_generator

    config, meta, tensors = read_checkpoint(path)
    gen = build_generator(config, calibrate=False)
    gen.schedule = LevelSchedule(
        levels=list(meta["levels"]),
        background_plane_depth=meta["background_plane_depth"])
    disc = Discriminator(resolution=config["dataset.resolution"],
                         base_width=config["disc.base_width"],
                         max_width=config["disc.max_width"])
    g_store = gen.param_store()
    d_store = ParamStore()
    d_store.register_module("disc", disc)
    _load_store("g", g_store, tensors)
    _load_store("d", d_store, tensors)
    g_store.step_count = meta["g_step_count"]
    d_store.step_count = meta["d_step_count"]
    state = TrainState(gen=gen, disc=disc, g_store=g_store, d_store=d_store,
                       iteration=meta["iteration"])
    return config, state
