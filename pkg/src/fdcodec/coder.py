"""Integer range coder over 16-bit quantized PMFs, plus discretized Gaussians.

The coder follows the LZMA range-coder layout: 32-bit ``range``, a ``low``
accumulator that may carry into bytes already produced (handled with the
cache/cache-size pair), byte-wise renormalization below 2**24.  The last
symbol of every PMF absorbs the truncation remainder of ``range >> 16``.

Two byte-level trims keep the overhead small: the always-zero first byte is
not written and trailing zero bytes are dropped (the decoder reads zeros
past the end).
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from ._detmath import det_erfc_abs, seqsum

PRECISION = 16
TOTAL = 1 << PRECISION
SIGMA_FLOOR = 0.04
DEFAULT_L = 64

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_SQRT2 = 1.4142135623730951


@dataclass(frozen=True)
class PmfTable:
    """Rows of integer frequencies (each summing to 2**16) over a contiguous alphabet.

    Symbol ``s`` maps to column ``s - offset``.
    """

    freqs: np.ndarray
    offset: int

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=np.int64)
        if f.ndim == 1:
            f = f[None]
        if f.ndim != 2 or f.shape[1] < 1:
            raise ValueError(f"freqs must be (rows, K), got {f.shape}")
        if np.any(f < 1):
            raise ValueError("every frequency must be >= 1")
        if np.any(f.sum(axis=1) != TOTAL):
            raise ValueError(f"each row must sum to {TOTAL}")
        f.setflags(write=False)
        object.__setattr__(self, "freqs", f)
        cdf = np.zeros((f.shape[0], f.shape[1] + 1), dtype=np.int64)
        np.cumsum(f, axis=1, out=cdf[:, 1:])
        cdf.setflags(write=False)
        object.__setattr__(self, "cdf", cdf)

    @property
    def n_rows(self):
        return self.freqs.shape[0]

    @property
    def n_symbols(self):
        return self.freqs.shape[1]

    def symbol_range(self):
        return self.offset, self.offset + self.n_symbols - 1


def uniform_pmf(n_symbols, offset=0):
    if not 1 <= n_symbols <= TOTAL:
        raise ValueError(f"alphabet size must be in [1, {TOTAL}]")
    f = np.full(n_symbols, TOTAL // n_symbols, dtype=np.int64)
    f[: TOTAL % n_symbols] += 1
    return PmfTable(f, offset)


def quantize_pmf(p, sink=None):
    """Map real probabilities (rows) to integer frequencies summing to 2**16.

    ``freq = 1 + floor(p * (2**16 - K))``, then the remaining units go one
    each to the largest fractional parts.  If a group of equal fractional
    parts straddles the cut, none of that group is incremented and the
    leftover units go to column ``sink`` (per row; default the first maximum
    of ``p``).  With a self-mirrored sink this keeps symmetric PMFs exactly
    symmetric.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    n, k = p.shape
    if k > TOTAL:
        raise ValueError("alphabet larger than the frequency total")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and nonnegative")
    s = seqsum(p, axis=1)[:, None]
    if np.any(s <= 0):
        raise ValueError("each probability row needs positive mass")
    budget = TOTAL - k
    scaled = (p / s) * budget
    base = np.floor(scaled)
    frac = scaled - base
    freqs = base.astype(np.int64) + 1
    remaining = TOTAL - freqs.sum(axis=1)
    if np.any(remaining < 0):
        raise AssertionError("quantizer overshoot")
    # (R+1)-th largest fractional part per row; units go to entries strictly above it
    srt = -np.sort(-frac, axis=1)
    r_idx = np.clip(remaining, 0, k - 1)
    cut = np.where(remaining < k, srt[np.arange(n), r_idx], -1.0)
    bump = (frac > cut[:, None]) & (remaining[:, None] > 0)
    freqs += bump
    left = remaining - bump.sum(axis=1)
    sink = np.argmax(p, axis=1) if sink is None else np.broadcast_to(np.asarray(sink, dtype=np.int64), (n,))
    freqs[np.arange(n), sink] += left
    return freqs


def gaussian_interval_probs(mu, sigma, L=DEFAULT_L):
    """Unnormalised masses of ``N(mu, sigma^2)`` on unit bins centred at -L..L, tails folded."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    mu, sigma = np.broadcast_arrays(mu, sigma)
    mu, sigma = mu.reshape(-1), sigma.reshape(-1)
    # K+1 bin edges shared by neighbouring bins; the outer two are +-inf
    edges = np.arange(-L - 0.5, L + 1.0, dtype=np.float64)
    b = (edges - mu[:, None]) / (sigma * _SQRT2)[:, None]
    c = np.zeros_like(b)
    # erfc(27) < 1e-300: leave far edges at 0 instead of evaluating them
    near = np.abs(b) < 27.0
    near[:, 0] = near[:, -1] = False
    c[near] = det_erfc_abs(b[near])
    lo, hi = b[:, :-1], b[:, 1:]
    c_lo, c_hi = c[:, :-1], c[:, 1:]
    lo_inf = np.zeros_like(lo, dtype=bool)
    lo_inf[:, 0] = True
    hi_inf = np.zeros_like(hi, dtype=bool)
    hi_inf[:, -1] = True
    both_pos = (lo >= 0) & ~lo_inf
    both_neg = (hi <= 0) & ~hi_inf
    p = np.where(
        both_pos,
        0.5 * (c_lo - c_hi),
        np.where(both_neg, 0.5 * (c_hi - c_lo), 1.0 - 0.5 * (c_lo + c_hi)),
    )
    return np.maximum(p, 0.0)


def discretize_gaussian(mu, sigma, L=DEFAULT_L, sigma_floor=SIGMA_FLOOR):
    """Quantized PMF table, one row per (mu, sigma) pair, over symbols -L..L."""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    mu_arr = np.asarray(mu, dtype=np.float64)
    if np.any(~np.isfinite(mu_arr)) or np.any(~np.isfinite(sigma_arr)):
        raise ValueError("mu and sigma must be finite")
    if np.any(sigma_arr < sigma_floor):
        raise ValueError(f"sigma below floor {sigma_floor}")
    if L < 0:
        raise ValueError("L must be >= 0")
    p = gaussian_interval_probs(mu_arr, sigma_arr, L)
    # leftover units go to the bin holding the mean
    sink = np.clip(np.floor(np.broadcast_to(mu_arr, np.broadcast_shapes(mu_arr.shape, sigma_arr.shape)).reshape(-1) + 0.5), -L, L)
    return PmfTable(quantize_pmf(p, sink.astype(np.int64) + L), -L)


# ----------------------------------------------------------------------------- range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, cum, freq):
        r = self.range >> PRECISION
        self.low += r * cum
        if cum + freq == TOTAL:
            self.range -= r * cum
        else:
            self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self):
        for _ in range(5):
            self._shift_low()
        # the value coded is < 1, so the carry never reaches the first byte
        assert self.out[0] == 0
        return bytes(self.out[1:]).rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode(self, cdf_row):
        """Decode one symbol index given a cumulative row ``[0, ..., 2**16]``."""
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            v = TOTAL - 1
        idx = bisect_right(cdf_row, v) - 1
        cum = cdf_row[idx]
        nxt = cdf_row[idx + 1]
        self.code -= r * cum
        if nxt == TOTAL:
            self.range -= r * cum
        else:
            self.range = r * (nxt - cum)
        if self.code >= self.range:
            raise ValueError("corrupted range-coder stream")
        while self.range < _TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8
        return idx


def _resolve_rows(table: PmfTable, n, index):
    if index is None:
        if table.n_rows != n:
            raise ValueError(f"need one PMF row per symbol: {table.n_rows} rows for {n} symbols")
        return np.arange(n)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size != n:
        raise ValueError("index must have one entry per symbol")
    if n and (index.min() < 0 or index.max() >= table.n_rows):
        raise ValueError("PMF index out of range")
    return index


def encode_symbols(symbols, table: PmfTable, index=None) -> bytes:
    """Range-code integer ``symbols``; row ``index[i]`` (default ``i``) is the PMF of symbol i."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    rows = _resolve_rows(table, sym.size, index)
    col = sym - table.offset
    if sym.size and (col.min() < 0 or col.max() >= table.n_symbols):
        lo, hi = table.symbol_range()
        raise ValueError(f"symbols must lie in [{lo}, {hi}]")
    cums = table.cdf[rows, col].tolist()
    freqs = table.freqs[rows, col].tolist()
    enc = RangeEncoder()
    for c, f in zip(cums, freqs):
        enc.encode(c, f)
    return enc.finish()


def decode_symbols(data, table: PmfTable, n=None, index=None):
    """Inverse of :func:`encode_symbols`; ``n`` defaults to the table's row count."""
    if n is None:
        if index is not None:
            n = len(index)
        else:
            n = table.n_rows
    rows = _resolve_rows(table, n, index)
    dec = RangeDecoder(data)
    cdf_rows = [row.tolist() for row in table.cdf]
    out = [dec.decode(cdf_rows[r]) for r in rows.tolist()]
    return np.asarray(out, dtype=np.int64) + table.offset


def cross_entropy_bits(symbols, table: PmfTable, index=None):
    """Ideal code length, in bits, of ``symbols`` under the quantized PMFs."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    rows = _resolve_rows(table, sym.size, index)
    f = table.freqs[rows, sym - table.offset]
    return float(np.sum(PRECISION - np.log2(f)))
