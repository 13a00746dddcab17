"""Single-file checkpoint container.

Layout: 8-byte magic, uint32 container version, uint32 header length, a
canonical JSON header (config text/digest, training progress, Adam
hyperparameters, rng state, record directory), then the float64
little-endian payloads of every record back to back. Canonical JSON and
fixed record order make save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .tensor import AdamState

MAGIC = b"QPCKPT01"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def model_records(model):
    """Ordered (name, array) pairs: trainable params plus batchnorm
    running statistics."""
    records = [(name, p.data) for name, p in model.parameters()]
    for name, bn in model.bn_states():
        if bn.running_mean is not None:
            records.append((f"{name}.running_mean", bn.running_mean))
            records.append((f"{name}.running_var", bn.running_var))
    return records


def save_checkpoint(path, model, config_text, config_digest, episode=0,
                    adam=None, rng_state=None):
    records = model_records(model)
    if adam is not None:
        for (name, _), m, v in zip(model.parameters(), adam.m, adam.v):
            records.append((f"adam.m.{name}", m))
            records.append((f"adam.v.{name}", v))
    header = {
        "config_digest": config_digest,
        "config_text": config_text,
        "episode": int(episode),
        "bn_initialized": [bool(bn.initialized) for _, bn in model.bn_states()],
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step_count": adam.step_count,
        },
        "rng_state": rng_state,
        "records": [{"name": n, "shape": list(a.shape)} for n, a in records],
    }
    blob = _canonical_json(header)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for _, arr in records:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_digest=None):
    """Read header + arrays. Raises CheckpointError on version or digest
    mismatch; returns (header, {name: array})."""
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(
                f"{path}: container version {version} incompatible with {VERSION}")
        header = json.loads(f.read(hlen))
        if expected_digest is not None and header["config_digest"] != expected_digest:
            raise CheckpointError(
                f"{path}: config digest {header['config_digest'][:12]}... does not "
                f"match active config {expected_digest[:12]}...")
        arrays = {}
        for rec in header["records"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated record {rec['name']}")
            arrays[rec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, arrays


def restore_model(model, header, arrays):
    """Load arrays into an already-built model (shapes must match)."""
    for name, p in model.parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing record {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"record {name}: shape {arrays[name].shape} != model {p.data.shape}")
        p.data = arrays[name].copy()
    for (name, bn), initialized in zip(model.bn_states(), header["bn_initialized"]):
        mkey, vkey = f"{name}.running_mean", f"{name}.running_var"
        if mkey in arrays:
            bn.running_mean = arrays[mkey].copy()
            bn.running_var = arrays[vkey].copy()
        bn.initialized = initialized


def restore_adam(model, header, arrays):
    """Rebuild the optimizer state recorded in the checkpoint, or None."""
    meta = header.get("adam")
    if meta is None:
        return None
    params = model.trainable()
    adam = AdamState(params, lr=meta["lr"], beta1=meta["beta1"],
                     beta2=meta["beta2"], eps=meta["eps"])
    adam.step_count = meta["step_count"]
    adam.m = [arrays[f"adam.m.{name}"].copy() for name, _ in model.parameters()]
    adam.v = [arrays[f"adam.v.{name}"].copy() for name, _ in model.parameters()]
    return adam
