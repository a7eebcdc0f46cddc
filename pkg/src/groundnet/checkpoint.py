"""Binary checkpoint format.

Layout::

    b"GNETCKPT"                 8-byte magic
    uint32 little-endian        format version
    uint64 little-endian        header length N
    N bytes                     UTF-8 JSON header (sorted keys)
    float64 little-endian data  parameters, concatenated in header order

The header lists every parameter's name, shape and element offset, and
carries the vocabulary, configs and training history. Writing is
deterministic: identical parameters and metadata give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .modules import GroundNetParams, ModelConfig, Vocabulary
from .tensor import Tensor

MAGIC = b"GNETCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: GroundNetParams
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    offset = 0
    chunks = []
    for name, t in ckpt.params.tensors.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.params.config.to_dict(),
        "vocab": list(ckpt.params.vocab.words),
        "params": entries,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    data = np.frombuffer(blob[20 + hlen:], dtype="<f8")
    vocab = Vocabulary(header["vocab"][2:])
    if vocab.words != header["vocab"]:
        raise CheckpointError("vocabulary does not start with the reserved tokens")
    tensors = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = data[e["offset"]:e["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"truncated data for {e['name']}")
        tensors[e["name"]] = Tensor(chunk.astype(np.float64).reshape(e["shape"]), requires_grad=True, name=e["name"])
    params = GroundNetParams(vocab, ModelConfig.from_dict(header["model_config"]), tensors)
    return Checkpoint(params, header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())
