"""Versioned single-file checkpoints.

Layout::

    MAGIC (8 bytes) | format version (u32 LE) | header length (u64 LE)
    | header (UTF-8 JSON, sorted keys) | raw little-endian parameter arrays

The header holds the manifest (module -> parameter -> shape, dtype, offset,
nbytes), the config snapshot, stage, epoch, schedule state and a SHA-256 of
the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"NAIRSTD\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: dict[str, dict[str, np.ndarray]]
    config: dict = field(default_factory=dict)
    stage: int = 0
    epoch: int = 0
    schedule: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def modules(self) -> tuple[str, ...]:
        return tuple(sorted(self.params))


def _split_state(model: nn.Module, modules: Iterable[str] | None = None) -> dict[str, dict[str, np.ndarray]]:
    wanted = set(modules) if modules is not None else None
    out: dict[str, dict[str, np.ndarray]] = {}
    for key, value in model.state_dict().items():
        module, _, name = key.partition(".")
        if wanted is not None and module not in wanted:
            continue
        out.setdefault(module, {})[name] = value.detach().cpu().numpy().copy()
    return out


def checkpoint_from_model(model: nn.Module, config: dict, stage: int, epoch: int,
                          schedule: dict | None = None, modules: Iterable[str] | None = None) -> Checkpoint:
    return Checkpoint(_split_state(model, modules), config, stage, epoch, schedule or {})


def apply_checkpoint(model: nn.Module, ckpt: Checkpoint, modules: Iterable[str] | None = None):
    """Load the named modules (default: all in the checkpoint) into ``model``."""
    modules = tuple(modules) if modules is not None else ckpt.modules
    state = model.state_dict()
    update = {}
    for module in modules:
        if module not in ckpt.params:
            raise CheckpointError(f"checkpoint has no module {module!r} (has {', '.join(ckpt.modules)})")
        expected = {k.partition(".")[2] for k in state if k.partition(".")[0] == module}
        got = set(ckpt.params[module])
        if expected != got:
            raise CheckpointError(f"module {module!r} parameter names do not match the model")
        for name, arr in ckpt.params[module].items():
            key = f"{module}.{name}"
            if tuple(state[key].shape) != arr.shape:
                raise CheckpointError(f"{key}: checkpoint shape {arr.shape} vs model {tuple(state[key].shape)}")
            update[key] = torch.from_numpy(arr.copy())
    model.load_state_dict(update, strict=False)


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest: dict[str, dict[str, dict]] = {}
    chunks = []
    offset = 0
    for module in sorted(ckpt.params):
        manifest[module] = {}
        for name in sorted(ckpt.params[module]):
            arr = np.asarray(ckpt.params[module][name], order="C")  # ascontiguousarray would promote 0-d to 1-d
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            manifest[module][name] = {
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(raw),
            }
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "schedule": ckpt.schedule,
        "manifest": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError("checkpoint header is truncated")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    payload = blob[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload is truncated or corrupted")
    params: dict[str, dict[str, np.ndarray]] = {}
    for module, entries in header["manifest"].items():
        params[module] = {}
        for name, meta in entries.items():
            raw = payload[meta["offset"]:meta["offset"] + meta["nbytes"]]
            dtype = np.dtype(meta["dtype"]).newbyteorder("<")
            arr = np.frombuffer(raw, dtype=dtype).reshape(meta["shape"])
            params[module][name] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(params, header["config"], header["stage"], header["epoch"], header["schedule"],
                      header["version"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint):
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)
