"""Bitstream (FDC1) and weights (FDCW) file formats.  All integers little-endian."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

BITSTREAM_MAGIC = b"FDC1"
BITSTREAM_VERSION = 1
WEIGHTS_MAGIC = b"FDCW"
WEIGHTS_VERSION = 1

NOISE_MODE_CODES = {"fresh-noise": 0, "paper-literal": 1}
NOISE_MODE_NAMES = {v: k for k, v in NOISE_MODE_CODES.items()}
LAMBDA_PRESETS = (0.0004, 0.005, 0.01, 0.02, 0.04, 0.016)
NO_PRESET = 0xFF

# magic, version, H, W, M, T, sigma_b_max, d_min, C_z, N, noise_mode, seed,
# channels, lambda preset, clamp count
_FIXED = struct.Struct("<4sHIIHHffHBBQBBI")


class FormatError(ValueError):
    pass


@dataclass
class BitstreamHeader:
    H: int
    W: int
    M: int
    T: int
    sigma_b_max: float
    d_min: float
    C_z: int
    N: int
    noise_mode: str
    seed: int
    channels: int
    chunk_sizes: tuple
    segment_lengths: tuple = ()
    segment_crcs: tuple = ()
    lambda_preset: int | None = None
    clamp_count: int = 0
    version: int = BITSTREAM_VERSION

    def __post_init__(self):
        # stored as float32 on disk; keep the in-memory value identical to what parses back
        self.sigma_b_max = _f32(self.sigma_b_max)
        self.d_min = _f32(self.d_min)
        self.chunk_sizes = tuple(int(c) for c in self.chunk_sizes)
        self.segment_lengths = tuple(int(c) for c in self.segment_lengths)
        self.segment_crcs = tuple(int(c) for c in self.segment_crcs)

    @property
    def n_segments(self):
        return 1 + 2 * len(self.chunk_sizes)


def _f32(x):
    return float(np.float32(x))


def serialize_header(h: BitstreamHeader) -> bytes:
    if h.noise_mode not in NOISE_MODE_CODES:
        raise FormatError(f"unknown noise mode {h.noise_mode!r}")
    if len(h.segment_lengths) != h.n_segments or len(h.segment_crcs) != h.n_segments:
        raise FormatError("segment table does not match the chunk count")
    preset = NO_PRESET if h.lambda_preset is None else h.lambda_preset
    try:
        head = _FIXED.pack(
            BITSTREAM_MAGIC,
            h.version,
            h.H,
            h.W,
            h.M,
            h.T,
            h.sigma_b_max,
            h.d_min,
            h.C_z,
            h.N,
            NOISE_MODE_CODES[h.noise_mode],
            h.seed,
            h.channels,
            preset,
            min(h.clamp_count, 0xFFFFFFFF),
        )
        n = len(h.chunk_sizes)
        body = struct.pack(f"<B{n}H", n, *h.chunk_sizes)
        body += struct.pack(f"<{h.n_segments}I", *h.segment_lengths)
        body += struct.pack(f"<{h.n_segments}I", *h.segment_crcs)
    except struct.error as e:
        raise FormatError(f"header field out of range: {e}") from None
    raw = head + body
    return raw + struct.pack("<I", zlib.crc32(raw))


def parse_header(data: bytes):
    """Return ``(header, header_size)``; checks magic, version and checksum."""
    if len(data) < _FIXED.size + 1:
        raise FormatError("file too short for a header")
    fixed = _FIXED.unpack_from(data, 0)
    if fixed[0] != BITSTREAM_MAGIC:
        raise FormatError(f"bad magic {fixed[0]!r}")
    if fixed[1] != BITSTREAM_VERSION:
        raise FormatError(f"unsupported bitstream version {fixed[1]}")
    pos = _FIXED.size
    n = data[pos]
    pos += 1
    n_seg = 1 + 2 * n
    need = pos + 2 * n + 8 * n_seg + 4
    if len(data) < need:
        raise FormatError("truncated header")
    sizes = struct.unpack_from(f"<{n}H", data, pos)
    pos += 2 * n
    lengths = struct.unpack_from(f"<{n_seg}I", data, pos)
    pos += 4 * n_seg
    crcs = struct.unpack_from(f"<{n_seg}I", data, pos)
    pos += 4 * n_seg
    (crc,) = struct.unpack_from("<I", data, pos)
    if zlib.crc32(data[:pos]) != crc:
        raise FormatError("header checksum mismatch")
    mode = fixed[10]
    if mode not in NOISE_MODE_NAMES:
        raise FormatError(f"unknown noise mode code {mode}")
    h = BitstreamHeader(
        H=fixed[2],
        W=fixed[3],
        M=fixed[4],
        T=fixed[5],
        sigma_b_max=fixed[6],
        d_min=fixed[7],
        C_z=fixed[8],
        N=fixed[9],
        noise_mode=NOISE_MODE_NAMES[mode],
        seed=fixed[11],
        channels=fixed[12],
        lambda_preset=None if fixed[13] == NO_PRESET else fixed[13],
        clamp_count=fixed[14],
        chunk_sizes=tuple(sizes),
        segment_lengths=tuple(lengths),
        segment_crcs=tuple(crcs),
        version=fixed[1],
    )
    if sum(sizes) != h.M:
        raise FormatError("chunk sizes do not sum to M")
    return h, pos + 4


def pack_bitstream(header: BitstreamHeader, segments) -> bytes:
    segments = [bytes(s) for s in segments]
    header.segment_lengths = tuple(len(s) for s in segments)
    header.segment_crcs = tuple(zlib.crc32(s) for s in segments)
    return serialize_header(header) + b"".join(segments)


def unpack_bitstream(data: bytes):
    """Return ``(header, segments, header_size)`` after verifying every checksum."""
    h, pos = parse_header(data)
    if pos + sum(h.segment_lengths) != len(data):
        raise FormatError(
            f"segment lengths ({sum(h.segment_lengths)} bytes) do not match payload ({len(data) - pos} bytes)"
        )
    segs = []
    for i, (n, crc) in enumerate(zip(h.segment_lengths, h.segment_crcs)):
        s = data[pos : pos + n]
        if zlib.crc32(s) != crc:
            raise FormatError(f"segment {i} checksum mismatch")
        segs.append(s)
        pos += n
    return h, segs, _header_size(h)


def _header_size(h):
    return _FIXED.size + 1 + 2 * len(h.chunk_sizes) + 8 * h.n_segments + 4


# ----------------------------------------------------------------------------- weights


def serialize_weights(tensors) -> bytes:
    """``tensors`` is a mapping or a sequence of ``(name, array)`` pairs."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    out = bytearray(WEIGHTS_MAGIC)
    out += struct.pack("<HI", WEIGHTS_VERSION, len(items))
    for name, arr in items:
        a = np.asarray(arr, dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise FormatError(f"tensor {name} is not finite in float32")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or a.ndim > 255:
            raise FormatError(f"tensor {name} name or rank too large")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape)
        out += a.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def parse_weights(data: bytes) -> dict:
    if len(data) < 14 or data[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a weights file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError("weights checksum mismatch")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    pos = 10
    end = len(data) - 4
    out = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + ln].decode("utf-8")
            pos += ln
            rank = data[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * n > end:
                raise FormatError(f"tensor {name} overruns the file")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(np.float64)
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed weights file: {e}") from None
    if pos != end:
        raise FormatError("trailing bytes after the last tensor")
    return out


def save_weights(path, tensors):
    with open(path, "wb") as f:
        f.write(serialize_weights(tensors))


def load_weights(path):
    with open(path, "rb") as f:
        return parse_weights(f.read())


def as_float32(tensors: dict) -> dict:
    """Round tensors to what a weights file stores (float32), kept as float64."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in tensors.items()}
