"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"FANETCKP"
    u32       format version
    u32       header length L
    L bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       raw float32 buffers, concatenated in header order

The header holds the architecture spec and, per tensor, its name, kind
("param" or "buffer"), shape and byte offset into the payload.  Nothing
time- or host-dependent is written, so identical parameters give identical
files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError
from .models import ArchitectureSpec, SegmentationNet, build

MAGIC = b"FANETCKP"
VERSION = 1


def _tensors(model: SegmentationNet):
    for name, p in model.named_parameters():
        yield name, "param", p.data
    for name, b in model.named_buffers():
        yield name, "buffer", b


def to_bytes(model: SegmentationNet, extra: dict[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, kind, arr in _tensors(model):
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {"spec": model.spec.to_dict(), "tensors": entries, "extra": extra or {}}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(raw)) + raw + b"".join(chunks)


def save(model: SegmentationNet, path, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model, extra))
    return path


def read_header(path) -> dict[str, Any]:
    blob = Path(path).read_bytes()
    return _parse(blob)[0]


def _parse(blob: bytes) -> tuple[dict[str, Any], bytes]:
    if blob[:8] != MAGIC:
        raise ConfigError("not a fanet checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    return header, blob[16 + hlen:]


def load(path, dtype: str = "single") -> tuple[SegmentationNet, dict[str, Any]]:
    """Rebuild the model stored at ``path``; returns (model, extra metadata)."""
    header, payload = _parse(Path(path).read_bytes())
    spec = ArchitectureSpec.from_dict(header["spec"])
    model = build(spec, seed=0, dtype=dtype)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stored = {e["name"] for e in header["tensors"]}
    expected = set(params) | set(buffers)
    if stored != expected:
        missing = sorted(expected - stored)[:3]
        extra_names = sorted(stored - expected)[:3]
        raise ConfigError(f"checkpoint tensors do not match spec (missing {missing}, unexpected {extra_names})")
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        target = params[entry["name"]].data if entry["kind"] == "param" else buffers[entry["name"]]
        if target.shape != arr.shape:
            raise ConfigError(f"shape mismatch for {entry['name']}: {arr.shape} vs {target.shape}")
        target[...] = arr
    return model, header.get("extra", {})
