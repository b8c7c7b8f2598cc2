"""Checkpoint files.

Layout::

    b"DCAPS1\\n"
    uint64 little-endian manifest length
    manifest: UTF-8 JSON (version, config, epoch, rng state, tensor table)
    payload: raw little-endian float64 arrays at the manifest offsets
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import Decaps
from .nn import Adam

MAGIC = b"DCAPS1\n"
VERSION = 1
_DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Decaps
    epoch: int
    rng_state: list[int] | None
    optimizer: Adam | None
    extra: dict


def _tensors(model: Decaps, optimizer: Adam | None) -> dict[str, np.ndarray]:
    arrays = dict(model.state_arrays())
    if optimizer is not None:
        for k in optimizer.params:
            arrays[f"adam.m.{k}"] = optimizer.m[k]
            arrays[f"adam.v.{k}"] = optimizer.v[k]
    return arrays


def save(path, model: Decaps, epoch: int = 0, rng_state=None, optimizer: Adam | None = None,
         extra: dict | None = None) -> None:
    arrays = _tensors(model, optimizer)
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        table.append({"name": name, "dtype": _DTYPE, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "rng_state": None if rng_state is None else [str(int(w)) for w in rng_state],
        "adam_t": None if optimizer is None else optimizer.t,
        "extra": extra or {},
        "payload_bytes": offset,
        "tensors": table,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_manifest(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated manifest length")
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {manifest.get('version')!r}")
    payload = data[pos + n:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    return manifest, payload


def load(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Rebuild the model (and optimizer state if stored) from ``path``.

    With ``expected`` the stored architecture must match it exactly.
    """
    manifest, payload = read_manifest(path)
    try:
        cfg = ModelConfig(**manifest["config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: bad config snapshot ({exc})") from None
    if expected is not None and expected.architecture() != cfg.architecture():
        diff = [k for k, v in cfg.architecture().items() if expected.architecture()[k] != v]
        raise CheckpointError(f"{path}: checkpoint config differs from run config in {', '.join(diff)}")
    model = Decaps(cfg)
    arrays = _tensors(model, None)
    stored = {}
    for entry in manifest["tensors"]:
        if entry.get("dtype") != _DTYPE:
            raise CheckpointError(f"{path}: tensor {entry['name']} has dtype {entry.get('dtype')}")
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        off = entry["offset"]
        if off < 0 or off + size > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        stored[entry["name"]] = np.frombuffer(payload, dtype=_DTYPE, count=size // 8, offset=off).reshape(shape)
    for name, arr in arrays.items():
        if name not in stored:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if stored[name].shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {stored[name].shape}, model needs {arr.shape}")
        arr[...] = stored[name]
    optimizer = None
    if manifest.get("adam_t") is not None:
        optimizer = Adam(model.named_parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2))
        optimizer.t = int(manifest["adam_t"])
        for k in optimizer.params:
            try:
                optimizer.m[k][...] = stored[f"adam.m.{k}"]
                optimizer.v[k][...] = stored[f"adam.v.{k}"]
            except KeyError:
                raise CheckpointError(f"{path}: missing optimizer state for {k}") from None
    rng_state = manifest.get("rng_state")
    if rng_state is not None:
        rng_state = [int(w) for w in rng_state]
    return Checkpoint(model, int(manifest.get("epoch", 0)), rng_state, optimizer, manifest.get("extra", {}))
