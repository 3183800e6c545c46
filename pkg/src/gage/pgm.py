"""Binary (P5) PGM reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np

from .errors import FormatError


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"PGM images must be 2D, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255 or not np.all(img == np.round(img)):
            raise FormatError("PGM pixel values must be integers in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pgm(image: np.ndarray, path) -> None:
    data = encode_pgm(image)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write PGM {os.fspath(path)!r}: {exc}") from exc


def _token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n and buf[pos:pos + 1].isspace():
        pos += 1
    if pos < n and buf[pos:pos + 1] == b"#":
        raise FormatError(f"comment lines are not supported (byte offset {pos})")
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of header at byte offset {start}")
    return buf[start:pos], pos


def decode_pgm(buf: bytes) -> np.ndarray:
    magic, pos = _token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected b'P5'")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _token(buf, pos)
        start = pos - len(tok)
        if not tok.isdigit():
            raise FormatError(f"invalid {name} {tok!r} at byte offset {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255) at byte offset {start}")
    if w < 1 or h < 1:
        raise FormatError(f"non-positive image size {w}x{h}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    need = w * h
    have = len(buf) - pos
    if have < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes from offset {pos}, data ends at byte offset {len(buf)}")
    if have > need:
        raise FormatError(f"trailing data after payload at byte offset {pos + need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read PGM {os.fspath(path)!r}: {exc}") from exc
    try:
        return decode_pgm(buf)
    except FormatError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}") from None
