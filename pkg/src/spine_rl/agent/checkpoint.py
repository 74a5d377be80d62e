"""Versioned binary checkpoints: JSON manifest plus little-endian float32 payload.

Layout::

    b"SPRLCKPT" | uint32 version | uint64 manifest length | manifest JSON | payload

The manifest lists every tensor as ``{name, shape, offset}`` (offset in
float32 elements) together with the training step, the configuration
snapshot, scalar optimizer state and a CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SPRLCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int
    config: dict
    extra: dict = field(default_factory=dict)


def _optimizer_tensors(prefix: str, optimizer, tensors: dict, scalars: dict):
    state = optimizer.state_dict()
    scalars[prefix] = {"param_groups": state["param_groups"], "state": {}}
    for pid, st in state["state"].items():
        entry = {}
        for key, val in st.items():
            if torch.is_tensor(val) and key != "step":
                tensors[f"{prefix}.{pid}.{key}"] = val.detach().cpu().numpy()
            else:
                entry[key] = float(val)
        scalars[prefix]["state"][str(pid)] = entry


def snapshot(net, optimizers: dict, step: int, config: dict, extra=None) -> Checkpoint:
    tensors = {f"model.{k}": v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    scalars = {}
    for name, opt in optimizers.items():
        _optimizer_tensors(f"optim.{name}", opt, tensors, scalars)
    return Checkpoint(tensors, int(step), dict(config), {"optimizers": scalars, **(extra or {})})


def restore_model(net, ckpt: Checkpoint):
    state = {k[len("model."):]: torch.as_tensor(v) for k, v in ckpt.tensors.items() if k.startswith("model.")}
    expected = net.state_dict()
    for k, v in expected.items():
        if k not in state:
            raise CheckpointError(f"checkpoint lacks tensor {k}")
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(f"dimension mismatch for {k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
    net.load_state_dict(state)


def restore_optimizer(name: str, optimizer, ckpt: Checkpoint):
    prefix = f"optim.{name}"
    meta = ckpt.extra["optimizers"][prefix]
    state = {}
    for pid, scalars in meta["state"].items():
        st = {k: torch.tensor(v) for k, v in scalars.items()}
        for key, arr in ckpt.tensors.items():
            head = f"{prefix}.{pid}."
            if key.startswith(head):
                st[key[len(head):]] = torch.as_tensor(arr.copy())
        state[int(pid)] = st
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": ckpt.step,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "tensors": entries,
        "payload_floats": offset,
        "crc32": zlib.crc32(payload),
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def load_checkpoint(path, expected_grid_dims=None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("corrupt checkpoint: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise CheckpointError("corrupt checkpoint: truncated manifest")
    try:
        manifest = json.loads(data[start:start + mlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    payload = data[start + mlen:]
    if len(payload) != 4 * manifest["payload_floats"]:
        raise CheckpointError("corrupt checkpoint: payload size does not match manifest")
    if zlib.crc32(payload) != manifest["crc32"]:
        raise CheckpointError("corrupt checkpoint: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
    ckpt = Checkpoint(tensors, manifest["step"], manifest["config"], manifest["extra"])
    if expected_grid_dims is not None:
        stored = tuple(ckpt.config.get("network", {}).get("grid_dims", ()))
        if stored != tuple(expected_grid_dims):
            raise CheckpointError(f"dimension mismatch: checkpoint grid {stored}, expected {tuple(expected_grid_dims)}")
    return ckpt
