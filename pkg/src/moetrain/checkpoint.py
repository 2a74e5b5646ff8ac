"""Flat binary checkpoint with a JSON sidecar.

Layout (all integers little-endian)::

    magic        8 bytes   b"MOETRNCK"
    version      u32       1
    meta_len     u32       length of the meta block
    meta         bytes     UTF-8 JSON, sorted keys, no whitespace
    n_tensors    u32
    per tensor:
      name_len   u16
      name       bytes     UTF-8
      ndim       u8
      dims       u64 * ndim
      data       f64 * prod(dims), row-major

Tensors are written in the order given (model parameters first, then
optimizer moments named ``adam.m.<param>`` / ``adam.v.<param>``). The meta
block holds the model config, router state and optimizer scalars.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import RejectedInputError

MAGIC = b"MOETRNCK"
VERSION = 1


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    mb = _meta_bytes(meta)
    parts = [MAGIC, struct.pack("<II", VERSION, len(mb)), mb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise RejectedInputError("not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise RejectedInputError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(blob[off:off + mlen].decode("utf-8"))
    off += mlen
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nl].decode("utf-8")
        off += nl
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        count = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
    if off != len(blob):
        raise RejectedInputError("trailing bytes after checkpoint payload")
    return tensors, meta


def pack_state(params: dict, opt_state=None) -> dict[str, np.ndarray]:
    out = dict(params)
    if opt_state is not None:
        for k in params:
            out[f"adam.m.{k}"] = opt_state.m[k]
        for k in params:
            out[f"adam.v.{k}"] = opt_state.v[k]
    return out


def save(path, params: dict, meta: dict, opt_state=None) -> None:
    path = Path(path)
    if opt_state is not None:
        meta = dict(meta, optimizer={"step": opt_state.step, **opt_state.hyper()})
    path.write_bytes(encode(pack_state(params, opt_state), meta))
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load(path):
    """Returns ``(params, optimizer_moments, meta)``."""
    tensors, meta = decode(Path(path).read_bytes())
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    moments = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    return params, moments, meta
