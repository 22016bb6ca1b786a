"""Binary checkpoints.

Layout (all little-endian)::

    8 bytes   magic  b"QGATECKP"
    8 bytes   uint64 manifest length L
    L bytes   UTF-8 JSON manifest
    rest      float64 parameter payload, in manifest order

The manifest carries the format version, the model config, and for every
parameter its name, shape and byte offset into the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import ModelConfig, QCrossAttPVT

MAGIC = b"QGATECKP"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_checkpoint(model: QCrossAttPVT, path, extra: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=_LE_F64).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": entries,
        "payload_bytes": offset,
    }
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_manifest(path) -> tuple[dict, bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", buf[8:16])
    if len(buf) < 16 + n:
        raise CheckpointTruncatedError(f"{path}: manifest truncated ({len(buf) - 16} of {n} bytes)")
    try:
        manifest = json.loads(buf[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from None
    return manifest, buf[16 + n:]


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> QCrossAttPVT:
    """Rebuild the model stored at ``path`` with bit-identical parameters."""
    manifest, payload = read_manifest(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    config = ModelConfig.from_dict(manifest["config"])
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        diff = {k: (v, expected_config.to_dict()[k]) for k, v in config.to_dict().items()
                if expected_config.to_dict()[k] != v}
        raise CheckpointConfigError(f"{path}: config differs from expected (stored, expected): {diff}")
    model = QCrossAttPVT(config, seed=0)
    params = dict(model.named_parameters())
    entries = manifest["params"]
    names = [e["name"] for e in entries]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        unexpected = sorted(set(names) - set(params))
        raise CheckpointShapeError(f"{path}: parameter set mismatch; missing {missing}, unexpected {unexpected}")
    for e in entries:
        p = params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointShapeError(
                f"{path}: parameter {e['name']} has shape {tuple(e['shape'])} in the manifest, model expects {p.shape}")
    for e in entries:
        p = params[e["name"]]
        nbytes = p.size * 8
        start = e["offset"]
        if start + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload ends at {len(payload)} bytes, {e['name']} needs [{start}, {start + nbytes})")
        p.data = np.frombuffer(payload, dtype=_LE_F64, count=p.size, offset=start).astype(np.float64).reshape(p.shape)
    return model


def checkpoint_config(path) -> ModelConfig:
    manifest, _ = read_manifest(path)
    return ModelConfig.from_dict(manifest["config"])
