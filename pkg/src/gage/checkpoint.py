"""Named-tensor checkpoint archives with a key=value metadata sidecar.

Binary layout (little-endian)::

    b"GAGB" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
                | u32 dims[rank] | row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"GAGB"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("<f4"): 0}


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C", copy=True)  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if code not in DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dtype = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"tensor {name!r}: payload truncated at byte offset {len(buf)}")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after last tensor at byte offset {pos}")
    return out


def format_meta(meta: Mapping[str, object]) -> str:
    lines = []
    for key, value in meta.items():
        text = repr(value) if isinstance(value, float) else str(value)
        if "\n" in text or "=" in key:
            raise CheckpointError(f"metadata entry {key!r} cannot be stored as a key=value line")
        lines.append(f"{key}={text}\n")
    return "".join(lines)


def parse_meta(text: str) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"metadata line {lineno} is not key=value: {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    meta_path(path).write_text(format_meta(meta or {}), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        tensors = decode_tensors(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    mp = meta_path(path)
    meta = parse_meta(mp.read_text(encoding="utf-8")) if mp.exists() else {}
    return tensors, meta
