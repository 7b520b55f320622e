"""Checkpoint files.

Layout: a magic line, one line of JSON header, then the raw little-endian
float64 bytes of every tensor in header order.  The header records the
format version, the network settings, the body fingerprint, tensor names
and shapes, free-form metadata and a SHA-256 over the header (without the
hash field) and the payload.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import Adam
from .errors import CheckpointError
from .network import Model, NetConfig, init_model

MAGIC = b"IMUCOCO-CHECKPOINT\n"
VERSION = 1


class Checkpoint(NamedTuple):
    model: Model
    optimizer_state: dict[str, np.ndarray] | None
    meta: dict


def _digest(header: dict, payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True).encode())
    h.update(payload)
    return h.hexdigest()


def save_checkpoint(path, model: Model, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    arrays = list(model.state_arrays().items())
    if optimizer is not None:
        arrays += [(f"optimizer.{k}", v) for k, v in optimizer.state_arrays().items()]
    header = {
        "version": VERSION,
        "net_config": asdict(model.config),
        "body_fingerprint": model.body_fingerprint,
        "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
        "meta": meta or {},
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    header["sha256"] = _digest(header, payload)
    Path(path).write_bytes(MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic line)")
    end = raw.find(b"\n", len(MAGIC))
    try:
        header = json.loads(raw[len(MAGIC) : end].decode())
        version = header["version"]
    except (ValueError, KeyError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: checkpoint header is corrupted; re-save or retrain the model") from None
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (this build reads version {VERSION}); "
            "retrain with 'imucoco train' to produce a compatible file"
        )
    payload = raw[end + 1 :]
    stored = header.pop("sha256", None)
    if stored != _digest(header, payload):
        raise CheckpointError(f"{path}: content hash mismatch, the file is corrupted; restore it from a clean copy")
    arrays = {}
    offset = 0
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=int))
        chunk = payload[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"{path}: payload shorter than the header describes")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    model = init_model(NetConfig(**header["net_config"]), seed=0, body_fingerprint=header["body_fingerprint"])
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("optimizer.")})
    opt = {k[len("optimizer.") :]: v for k, v in arrays.items() if k.startswith("optimizer.")} or None
    return Checkpoint(model, opt, header["meta"])


def restore_optimizer(ckpt: Checkpoint, lr: float, betas, eps: float) -> Adam:
    """Adam over the checkpoint's model, resuming its moments when present."""
    opt = Adam(ckpt.model.parameters(), lr=lr, betas=betas, eps=eps)
    if ckpt.optimizer_state is not None:
        opt.load_state_arrays(ckpt.optimizer_state)
    return opt
