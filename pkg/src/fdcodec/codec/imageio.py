"""Binary PGM (P5) and PPM (P6) with 8-bit samples."""

from __future__ import annotations

import numpy as np


def _tokens(data, count, pos):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos


def parse_pnm(data: bytes):
    """Return a uint8 array (H, W, C) with C = 1 (P5) or 3 (P6)."""
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}; only binary P5/P6")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ValueError("malformed PNM header") from None
    if w < 1 or h < 1:
        raise ValueError("PNM dimensions must be positive")
    if maxval != 255:
        raise ValueError(f"only 8-bit PNM (maxval 255) is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    body = data[pos : pos + need]
    if len(body) != need:
        raise ValueError(f"PNM payload has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def read_pnm(path):
    with open(path, "rb") as f:
        return parse_pnm(f.read())


def format_pnm(img) -> bytes:
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.dtype != np.uint8:
        raise ValueError("image must be uint8")
    h, w, c = a.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes()


def write_pnm(path, img):
    with open(path, "wb") as f:
        f.write(format_pnm(img))


def to_field(img):
    """uint8 -> float field in [-1, 1]."""
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def from_field(x):
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)
