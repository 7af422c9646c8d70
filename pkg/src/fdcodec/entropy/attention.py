"""Windowed masked self-attention with a Laplacian relative-position bias.

Logits are ``q.k / sqrt(d) + P`` with masked keys set to -1e9 before the
softmax.  Keys are the non-anchor positions of the window; anchors and
padding are masked.  All arithmetic goes through :mod:`fdcodec._detmath`
so one query row gives the same bits whether it is evaluated alone or with
the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._detmath import det_exp, det_linear, seqsum

MASK_VALUE = -1e9


def laplacian_bias(A, sigma, dy, dx):
    """``A^2 exp(-(|dy|+|dx|) / (2 sigma^2))`` elementwise."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dist = np.abs(np.asarray(dy, dtype=np.float64)) + np.abs(np.asarray(dx, dtype=np.float64))
    return (A * A) * det_exp(-dist / (2.0 * sigma * sigma))


def laplacian_pe_table(A, sigma, N):
    """N^2 x N^2 table over row-major window positions; entry [i, k] uses position(k) - position(i)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    yy, xx = np.divmod(np.arange(N * N), N)
    return laplacian_bias(A, sigma, yy[None] - yy[:, None], xx[None] - xx[:, None])


def attention_weights(q, k, pbias, key_valid):
    """Softmax rows over keys.  q: (..., nq, d), k: (..., nk, d), pbias: (..., nq, nk)."""
    d = q.shape[-1]
    dots = seqsum(q[..., :, None, :] * k[..., None, :, :], axis=-1)
    logits = dots / np.sqrt(float(d)) + pbias
    logits = np.where(key_valid[..., None, :], logits, MASK_VALUE)
    m = np.max(logits, axis=-1, keepdims=True)
    e = det_exp(logits - m)
    return e / seqsum(e, axis=-1)[..., None]


def attend(q, k, v, pbias, key_valid):
    w = attention_weights(q, k, pbias, key_valid)
    return seqsum(w[..., :, :, None] * v[..., None, :, :], axis=-2)


@dataclass(frozen=True)
class WindowGrid:
    """Window partition of an (H, W) grid: ``index[w, s]`` is the flat position in
    window ``w`` slot ``s`` (-1 for padding); ``coords`` are (row, col) within the window."""

    index: np.ndarray
    coords: np.ndarray
    win_of: np.ndarray  # flat position -> window
    slot_of: np.ndarray  # flat position -> slot


def window_grid(h, w, N, shifted) -> WindowGrid:
    nh, nw = min(N, h), min(N, w)
    ph, pw = -(-h // nh) * nh, -(-w // nw) * nw
    flat = np.full((ph, pw), -1, dtype=np.int64)
    flat[:h, :w] = np.arange(h * w).reshape(h, w)
    if shifted:
        flat = np.roll(flat, (-(nh // 2), -(nw // 2)), axis=(0, 1))
    win = flat.reshape(ph // nh, nh, pw // nw, nw).transpose(0, 2, 1, 3).reshape(-1, nh * nw)
    cy, cx = np.divmod(np.arange(nh * nw), nw)
    win_of = np.empty(h * w, dtype=np.int64)
    slot_of = np.empty(h * w, dtype=np.int64)
    wi, si = np.nonzero(win >= 0)
    win_of[win[wi, si]] = wi
    slot_of[win[wi, si]] = si
    return WindowGrid(win, np.stack([cy, cx], axis=1), win_of, slot_of)


@dataclass(frozen=True)
class AttentionBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def check(self, f):
        d = self.wq.shape[1]
        for name, arr, shp in (
            ("wq", self.wq, (f, d)),
            ("wk", self.wk, (f, d)),
            ("wv", self.wv, (f, self.wv.shape[1])),
            ("wo", self.wo, (self.wv.shape[1], f)),
        ):
            if arr.shape != shp:
                raise ValueError(f"attention {name} has shape {arr.shape}, expected {shp}")


def window_bias(grid: WindowGrid, A, sigma):
    c = grid.coords
    return laplacian_bias(A, sigma, c[None, :, 0] - c[:, None, 0], c[None, :, 1] - c[:, None, 1])


def windowed_attention(x, key_mask, block: AttentionBlock, A, sigma, N, shifted, rows=None):
    """One (S)W-MSA block with residual: ``x + attn(x) @ wo`` at the query positions.

    ``x`` is (H, W, F); ``key_mask`` (H, W) marks positions allowed as keys.
    ``rows`` selects flat query positions (default: all of ``key_mask``);
    the result holds those rows only, in the given order.
    """
    h, w, f = x.shape
    block.check(f)
    grid = window_grid(h, w, N, shifted)
    flat_x = x.reshape(h * w, f)
    valid = key_mask.reshape(-1)
    rows = np.flatnonzero(valid) if rows is None else np.asarray(rows, dtype=np.int64)
    pbias = window_bias(grid, A, sigma)
    wins = grid.win_of[rows]
    uw = np.unique(wins)
    # projections are row-wise, so each needed row is projected once for all windows
    slots_all = grid.index[uw]
    need = np.unique(slots_all[slots_all >= 0])
    pos = np.full(h * w, -1, dtype=np.int64)
    pos[need] = np.arange(need.size)
    k_all = det_linear(flat_x[need], block.wk)
    v_all = det_linear(flat_x[need], block.wv)
    q_all = det_linear(flat_x[rows], block.wq)
    att = np.empty((rows.size, block.wv.shape[1]))
    for wi in uw:
        sel = np.flatnonzero(wins == wi)
        slots = grid.index[wi]
        present = slots >= 0
        keys = np.where(present, slots, need[0])
        kvalid = present & valid[keys]
        kk = pos[keys]
        pb = pbias[grid.slot_of[rows[sel]]]
        att[sel] = attend(q_all[sel], k_all[kk], v_all[kk], pb, kvalid)
    return flat_x[rows] + det_linear(att, block.wo)
