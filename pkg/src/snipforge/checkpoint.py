"""Binary checkpoint format.

Layout (little-endian)::

    b"SNIPCKPT1"            magic
    u32                     manifest length in bytes
    manifest                UTF-8 JSON: kind, config, budget, ablation, vocab,
                            tensors = [{name, shape, dtype: "<f8", offset}]
    blob                    concatenated f64 arrays, offsets relative to blob start

Serialization is canonical (sorted JSON keys, parameter walk order), so the
same parameters always produce the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoders import EncoderConfig
from .text import LengthBudget, Vocab

MAGIC = b"SNIPCKPT1"


class CheckpointError(ValueError):
    pass


def to_bytes(model) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "budget": asdict(model.budget),
        "ablation": asdict(model.ablation),
        "seed": model.seed,
        "k": getattr(model, "k", None),
        "vocab": model.vocab.itos[4:],
        "hash_buckets": model.vocab.hash_buckets,
        "tensors": tensors,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def fingerprint(model_or_bytes) -> bytes:
    """SHA-256 of the canonical checkpoint bytes (32 bytes)."""
    data = model_or_bytes if isinstance(model_or_bytes, (bytes, bytearray)) else to_bytes(model_or_bytes)
    return hashlib.sha256(data).digest()


def save(model, path) -> bytes:
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return fingerprint(data)


def from_bytes(data: bytes):
    from .models import Ablation, build_model

    if not data.startswith(MAGIC):
        raise CheckpointError("not a SNIPCKPT1 checkpoint (bad magic)")
    try:
        (n,) = struct.unpack_from("<I", data, len(MAGIC))
        start = len(MAGIC) + 4
        manifest = json.loads(data[start : start + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
    blob = memoryview(data)[start + n :]
    vocab = Vocab(manifest["vocab"], hash_buckets=manifest.get("hash_buckets", 0))
    model = build_model(
        manifest["kind"], EncoderConfig(**manifest["config"]), vocab,
        LengthBudget(**manifest["budget"]), Ablation(**manifest["ablation"]),
        seed=manifest["seed"], k=manifest.get("k") or 20,
    )
    params = dict(model.named_parameters())
    entries = manifest["tensors"]
    if {e["name"] for e in entries} != set(params):
        raise CheckpointError("checkpoint tensors do not match the model architecture")
    for e in entries:
        size = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["offset"] + size > len(blob):
            raise CheckpointError(f"tensor {e['name']} runs past the end of the blob")
        arr = np.frombuffer(blob[e["offset"] : e["offset"] + size], dtype=e["dtype"]).reshape(e["shape"])
        params[e["name"]].data = arr.astype(np.float64)
    return model


def load(path):
    return from_bytes(Path(path).read_bytes())
