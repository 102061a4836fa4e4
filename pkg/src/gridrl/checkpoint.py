"""Binary checkpoints: magic, version, JSON header, little-endian float32 data."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, UnifiedModel
from .tensor import ParamStore
from .vocab import Vocabulary

MAGIC = b"GRIDRLCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(model: UnifiedModel, config_hash: str = "", rng_state: dict | None = None, extra: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        arr = p.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "vocab_manifest": model.vocab.manifest(),
        "model_config": model.config.to_dict(),
        "config_hash": config_hash,
        "rng_state": rng_state or {},
        "params": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def from_bytes(data: bytes, vocab: Vocabulary | None = None) -> tuple[UnifiedModel, dict]:
    """Rebuild the model; refuses a checkpoint whose vocabulary differs from ``vocab``."""
    n = len(MAGIC)
    if data[:n] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, n)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = n + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen])
    stored = Vocabulary.from_manifest(header["vocab_manifest"])
    if vocab is not None and vocab.manifest() != header["vocab_manifest"]:
        raise CheckpointError("checkpoint vocabulary does not match the configured vocabulary")
    body = np.frombuffer(data, dtype="<f4", offset=start + hlen)
    tensors = {}
    for e in header["params"]:
        chunk = body[e["offset"] : e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise CheckpointError(f"truncated data for parameter {e['name']!r}")
        tensors[e["name"]] = torch.from_numpy(chunk.astype(np.float32).reshape(e["shape"]))
    model = UnifiedModel(ModelConfig(**header["model_config"]), vocab or stored, ParamStore(tensors))
    return model, header


def save(path, model: UnifiedModel, config_hash: str = "", rng_state: dict | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, config_hash, rng_state, extra))


def load(path, vocab: Vocabulary | None = None) -> tuple[UnifiedModel, dict]:
    return from_bytes(Path(path).read_bytes(), vocab)
