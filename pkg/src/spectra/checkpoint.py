"""Flat checkpoint manifests: JSON header + little-endian float64 payload.

Layout: 4-byte magic ``SPCK``, uint32 little-endian header length, UTF-8 JSON
header, then the raw parameter payload in header order. Parameter names are
architecture-derived and never depend on team size, which is what makes
cross-population transfer reloads possible.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"SPCK"
PAYLOAD_DTYPE = "<f8"


def _as_pairs(named_params):
    out = []
    for name, tensor in named_params:
        value = tensor.value if hasattr(tensor, "value") else np.asarray(tensor)
        out.append((name, value))
    return out


def save_manifest(path, named_params, meta: dict | None = None) -> str:
    """Write parameters and return the content hash of the payload."""
    pairs = _as_pairs(named_params)
    header = {
        "version": 1,
        "dtype": PAYLOAD_DTYPE,
        "meta": meta or {},
        "params": [{"name": n, "shape": list(v.shape)} for n, v in pairs],
    }
    payload = b"".join(np.ascontiguousarray(v, dtype=PAYLOAD_DTYPE).tobytes()
                       for _, v in pairs)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return hashlib.sha256(payload).hexdigest()


def load_manifest(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint manifest")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=PAYLOAD_DTYPE).reshape(shape).copy()
    return header, arrays


def manifest_signature(path) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) pairs; the architecture identity of a checkpoint."""
    header, _ = load_manifest(path)
    return [(e["name"], tuple(e["shape"])) for e in header["params"]]


def restore(named_params, arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into parameters bit-exactly; names must match 1:1."""
    pairs = list(named_params)
    have = {name for name, _ in pairs}
    want = set(arrays)
    if have != want:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise ValueError(f"manifest mismatch: missing={missing} extra={extra}")
    for name, tensor in pairs:
        value = arrays[name]
        if tuple(tensor.value.shape) != value.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{tensor.value.shape} vs {value.shape}")
        tensor.value[...] = value.astype(tensor.value.dtype)


def content_hash(named_params) -> str:
    payload = b"".join(np.ascontiguousarray(v, dtype=PAYLOAD_DTYPE).tobytes()
                       for _, v in _as_pairs(named_params))
    return hashlib.sha256(payload).hexdigest()
