"""Versioned, checksummed snapshot files.

Layout::

    8 bytes   magic b"SFPSCKPT"
    4 bytes   format version (u32 LE)
    32 bytes  SHA-256 of everything after this field
    8 bytes   body length (u64 LE)
    body:     u32 header length, JSON header, then an ``.npz`` archive

The JSON header holds the model fingerprint, the next iteration to run, and
per-node metadata; arrays live in the archive under namespaced keys.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, ConfigError, FormatError
from ..network import ModelSpec

MAGIC = b"SFPSCKPT"
FORMAT_VERSION = 1
_PRE = struct.Struct("<8sI32sQ")


def save_checkpoint(path, snapshot: dict, spec: ModelSpec, next_iteration: int, extra: dict | None = None) -> str:
    """Write ``snapshot`` (``{"server": node, "workers": {id: node}}``); returns the hex digest."""
    arrays = dict(snapshot["server"]["arrays"])
    for node in snapshot["workers"].values():
        arrays.update(node["arrays"])
    header = {
        "spec": spec.fingerprint(),
        "next_iteration": int(next_iteration),
        "server": snapshot["server"]["meta"],
        "workers": {str(k): v["meta"] for k, v in snapshot["workers"].items()},
        "extra": extra or {},
        "arrays": sorted(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    hjson = json.dumps(header, sort_keys=True).encode()
    body = struct.pack("<I", len(hjson)) + hjson + buf.getvalue()
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(_PRE.pack(MAGIC, FORMAT_VERSION, digest, len(body)) + body)
    return digest.hex()


def _read(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _PRE.size:
        raise FormatError(f"{path}: too short for a checkpoint")
    magic, version, digest, blen = _PRE.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format {version}")
    body = data[_PRE.size :]
    if len(body) != blen or hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    (hlen,) = struct.unpack_from("<I", body)
    header = json.loads(body[4 : 4 + hlen])
    return header, body[4 + hlen :]


def inspect_checkpoint(path) -> dict:
    header, _ = _read(path)
    _, _, digest, _ = _PRE.unpack_from(Path(path).read_bytes())
    header["sha256"] = digest.hex()
    return header


def load_checkpoint(path, spec: ModelSpec | None = None) -> tuple[dict, int]:
    """Returns ``(snapshot, next_iteration)``; rejects a different model spec."""
    header, npz = _read(path)
    if spec is not None and header["spec"] != spec.fingerprint():
        raise ConfigError("checkpoint was written for a different model spec")
    with np.load(io.BytesIO(npz), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}

    def node(prefix, meta):
        return {"meta": meta, "arrays": {k: v for k, v in arrays.items() if k.startswith(prefix)}}

    snap = {
        "server": node("server/", header["server"]),
        "workers": {w: node(f"worker{w}/", m) for w, m in header["workers"].items()},
    }
    return snap, int(header["next_iteration"])
