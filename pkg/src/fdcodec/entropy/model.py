"""Entropy-parameter network: hyperprior, channel context, checkerboard local
context, windowed attention, and the (mu, sigma) head.

Latents are channel-last ``(h, w, M)``.  Decoding order is
``z_hat -> for each chunk j: anchors -> non-anchors``; every quantity below
reads only values that precede it in that order.

Evaluation is row based: each output row (one spatial position) is a
function of gathered input rows, and every product/sum uses the fixed-order
kernels of :mod:`fdcodec._detmath`.  Whether rows are computed all at once,
in thread blocks, or one at a time, the bits are the same.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .._detmath import det_linear, det_softplus
from .._validation import make_rng
from ..coder import DEFAULT_L, SIGMA_FLOOR
from .attention import AttentionBlock, window_grid, windowed_attention
from .layout import PHASES, ChunkLayout, checkerboard_masks, chunk_layout

CONTEXTS = ("hyper", "channel", "local", "global")

# (dy, dx) taps of the 5x5 local kernel that land on anchors when centred on a non-anchor
LOCAL_TAPS = tuple((dy, dx) for dy in range(-2, 3) for dx in range(-2, 3) if (dy + dx) % 2 != 0)


@dataclass(frozen=True)
class EntropyConfig:
    M: int = 192
    C_z: int = 32
    N: int = 4
    contexts: tuple = CONTEXTS
    L: int = DEFAULT_L

    def __post_init__(self):
        bad = [c for c in self.contexts if c not in CONTEXTS]
        if bad:
            raise ValueError(f"unknown contexts {bad}; choose from {CONTEXTS}")
        if "global" in self.contexts and "local" not in self.contexts:
            raise ValueError("global context is built on local context features")
        if self.N < 1 or self.C_z < 1:
            raise ValueError("N and C_z must be >= 1")
        chunk_layout(self.M)

    @property
    def layout(self) -> ChunkLayout:
        return chunk_layout(self.M)

    def has(self, ctx):
        return ctx in self.contexts


# ----------------------------------------------------------------------------- convolution helpers


def _patch_rows(xp, rows_yx, taps):
    """Gather ``xp[y+dy, x+dx, :]`` for each row and tap -> (n, len(taps)*C)."""
    if rows_yx.shape[0] == 0:
        return np.zeros((0, len(taps) * xp.shape[2]))
    ty = np.array([t[0] for t in taps])
    tx = np.array([t[1] for t in taps])
    g = xp[rows_yx[:, 0:1] + ty[None], rows_yx[:, 1:2] + tx[None]]
    return g.reshape(rows_yx.shape[0], -1)


def _square_taps(k):
    return tuple((dy, dx) for dy in range(k) for dx in range(k))


def conv_rows(x, w, b, rows_yx, stride=1):
    """'Same' zero-padded convolution evaluated at output positions ``rows_yx``."""
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = _patch_rows(xp, rows_yx * stride, _square_taps(k))
    return det_linear(cols, w.reshape(-1, w.shape[3]), b)


def conv_full(x, w, b, stride=1):
    h, wd = x.shape[:2]
    oh, ow = -(-h // stride), -(-wd // stride)
    yx = np.argwhere(np.ones((oh, ow), dtype=bool))
    return conv_rows(x, w, b, yx, stride).reshape(oh, ow, -1)


def local_rows(y_anchor_only, w, b, rows_yx):
    """Checkerboard-masked 5x5 convolution: only the 12 anchor-relative taps are read."""
    xp = np.pad(y_anchor_only, ((2, 2), (2, 2), (0, 0)))
    taps = tuple((dy + 2, dx + 2) for dy, dx in LOCAL_TAPS)
    cols = _patch_rows(xp, rows_yx, taps)
    wt = np.stack([w[dy, dx] for dy, dx in taps])  # (12, c, F)
    return det_linear(cols, wt.reshape(-1, w.shape[3]), b)


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _relu(x):
    return np.maximum(x, 0.0)


def _split_rows(n, threads):
    if threads <= 1 or n < 2 * threads:
        return [slice(0, n)]
    edges = np.linspace(0, n, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _map_rows(fn, rows, threads, pool=None):
    """Apply ``fn`` to contiguous blocks of ``rows`` (optionally on a thread pool) and stack."""
    blocks = _split_rows(len(rows), threads)
    if len(blocks) == 1:
        return fn(rows)
    if pool is None:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda s: fn(rows[s]), blocks))
    else:
        parts = list(pool.map(lambda s: fn(rows[s]), blocks))
    return np.concatenate(parts, axis=0)


@lru_cache(maxsize=64)
def _grid(h, w, N, shifted):
    return window_grid(h, w, N, shifted)


# ----------------------------------------------------------------------------- model


@dataclass
class EntropyModel:
    """Weights plus config; ``check()`` lists every expected tensor name and shape."""

    config: EntropyConfig
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in self.weights.items()}
        self.check()

    # -- weight bookkeeping -------------------------------------------------
    def w(self, name):
        try:
            return self.weights[name]
        except KeyError:
            raise KeyError(f"entropy model weight {name!r} missing") from None

    def widths(self):
        cfg = self.config
        hf = self.w("hs2.w").shape[3] if cfg.has("hyper") else 0
        out = []
        for j in range(cfg.layout.n_chunks):
            fc = self.w(f"c{j}.cc.w").shape[3] if (cfg.has("channel") and j > 0) else 0
            fl = self.w(f"c{j}.lc.w").shape[3] if cfg.has("local") else 0
            fg = fl if cfg.has("global") else 0
            out.append((hf, fc, fl, fg))
        return out

    def check(self):
        cfg = self.config
        lay = cfg.layout
        shapes = {}
        if cfg.has("hyper"):
            ch = self.w("ha1.w").shape[3]
            hh = self.w("hs1.w").shape[3]
            hf = self.w("hs2.w").shape[3]
            shapes.update(
                {
                    "ha1.w": (3, 3, cfg.M, ch),
                    "ha1.b": (ch,),
                    "ha2.w": (3, 3, ch, cfg.C_z),
                    "ha2.b": (cfg.C_z,),
                    "hs1.w": (3, 3, cfg.C_z, hh),
                    "hs1.b": (hh,),
                    "hs2.w": (3, 3, hh, hf),
                    "hs2.b": (hf,),
                    "zprior.mu": (cfg.C_z,),
                    "zprior.sigma": (cfg.C_z,),
                }
            )
        for j, (hf, fc, fl, fg) in enumerate(self.widths()):
            c = lay.sizes[j]
            p = f"c{j}."
            if fc:
                shapes[p + "cc.w"] = (3, 3, lay.offsets[j], fc)
                shapes[p + "cc.b"] = (fc,)
            if fl:
                shapes[p + "lc.w"] = (5, 5, c, fl)
                shapes[p + "lc.b"] = (fl,)
            if fg:
                shapes[p + "pe"] = (2,)
                for blk in (0, 1):
                    d = self.w(f"{p}att{blk}.q").shape[1]
                    dv = self.w(f"{p}att{blk}.v").shape[1]
                    shapes[f"{p}att{blk}.q"] = (fl, d)
                    shapes[f"{p}att{blk}.k"] = (fl, d)
                    shapes[f"{p}att{blk}.v"] = (fl, dv)
                    shapes[f"{p}att{blk}.o"] = (dv, fl)
            fh = self.w(p + "head1.w").shape[1]
            shapes[p + "head1.w"] = (hf + fc + fl + fg, fh)
            shapes[p + "head1.b"] = (fh,)
            shapes[p + "head2.w"] = (fh, 2 * c)
            shapes[p + "head2.b"] = (2 * c,)
        for name, shp in shapes.items():
            arr = self.w(name)
            if arr.shape != shp:
                raise ValueError(f"entropy weight {name} has shape {arr.shape}, expected {shp}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"entropy weight {name} is not finite")
        if cfg.has("global"):
            for j in range(lay.n_chunks):
                if not self.w(f"c{j}.pe")[1] > 0:
                    raise ValueError(f"c{j}.pe sigma must be positive")
        if cfg.has("hyper") and np.any(self.w("zprior.sigma") < SIGMA_FLOOR):
            raise ValueError("hyper prior sigma below floor")
        return shapes

    # -- hyperprior ------------------------------------------------------------
    def hyper_analysis(self, y_hat):
        h = _relu(conv_full(y_hat, self.w("ha1.w"), self.w("ha1.b"), stride=2))
        z = conv_full(h, self.w("ha2.w"), self.w("ha2.b"), stride=2)
        return np.clip(np.rint(z), -self.config.L, self.config.L)

    def hyper_synthesis(self, z_hat, latent_hw):
        h = _relu(conv_full(upsample2(z_hat), self.w("hs1.w"), self.w("hs1.b")))
        f = conv_full(upsample2(h), self.w("hs2.w"), self.w("hs2.b"))
        return f[: latent_hw[0], : latent_hw[1]]

    def hyper_roundtrip(self, y_hat):
        """Returns ``(z_hat, hyper_features)``."""
        z_hat = self.hyper_analysis(y_hat)
        return z_hat, self.hyper_synthesis(z_hat, y_hat.shape[:2])

    def z_params(self, z_shape):
        n = int(np.prod(z_shape[:2]))
        mu = np.tile(self.w("zprior.mu"), n)
        sigma = np.tile(self.w("zprior.sigma"), n)
        return mu, sigma

    def hyper_features(self, z_hat, latent_hw):
        if not self.config.has("hyper"):
            return np.zeros(tuple(latent_hw) + (0,))
        return self.hyper_synthesis(z_hat, latent_hw)

    # -- per-chunk parameters ----------------------------------------------
    def chunk_state(self, y_view, hyper_feat, j):
        return _ChunkState(self, y_view, hyper_feat, j)

    def chunk_params(self, y_view, hyper_feat, j, phase, rows=None, threads=1, mode="parallel", state=None):
        """Gaussian parameters of chunk ``j`` at the positions of ``phase``.

        Returns ``(mu, sigma)`` of shape (n_positions, chunk_size), positions
        in row-major order (or the order of ``rows``, flat indices).
        ``mode="sequential"`` evaluates one position at a time.
        """
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if not 0 <= j < self.config.layout.n_chunks:
            raise ValueError(f"chunk index {j} out of range")
        h, w = y_view.shape[:2]
        part = checkerboard_masks(h, w)
        if rows is None:
            rows = np.flatnonzero(part.mask(phase).reshape(-1))
        rows = np.asarray(rows, dtype=np.int64)
        if np.any(part.mask(phase).reshape(-1)[rows] == False):  # noqa: E712
            raise ValueError(f"rows include positions outside phase {phase!r}")
        st = state if state is not None else self.chunk_state(y_view, hyper_feat, j)
        if mode == "sequential":
            outs = [st.params(rows[i : i + 1], phase) for i in range(rows.size)]
            if not outs:
                c = self.config.layout.sizes[j]
                return np.zeros((0, c)), np.zeros((0, c))
            return np.concatenate([o[0] for o in outs]), np.concatenate([o[1] for o in outs])
        if mode != "parallel":
            raise ValueError("mode must be 'parallel' or 'sequential'")
        if threads <= 1:
            return st.params(rows, phase)
        with ThreadPoolExecutor(threads) as pool:
            if phase == "non_anchor":
                st.prepare_spatial(rows, threads, pool)
            mu = _map_rows(lambda r: np.concatenate(st.params(r, phase), axis=1), rows, threads, pool)
        c = self.config.layout.sizes[j]
        return mu[:, :c], mu[:, c:]

    def all_params(self, y_hat, z_hat=None, threads=1, mode="parallel"):
        """Parameters for every chunk/phase given the full latent (encoder view).

        Returns dict ``(j, phase) -> (rows, mu, sigma)``.
        """
        hf = self.hyper_features(z_hat, y_hat.shape[:2])
        out = {}
        for j in range(self.config.layout.n_chunks):
            st = self.chunk_state(y_hat, hf, j)
            for phase in PHASES:
                part = checkerboard_masks(*y_hat.shape[:2])
                rows = np.flatnonzero(part.mask(phase).reshape(-1))
                mu, sg = self.chunk_params(y_hat, hf, j, phase, rows, threads, mode, state=st)
                out[(j, phase)] = (rows, mu, sg)
        return out


class _ChunkState:
    """Memoised per-row intermediates for one chunk."""

    def __init__(self, model: EntropyModel, y, hyper_feat, j):
        cfg = model.config
        lay = cfg.layout
        self.model, self.j = model, j
        self.h, self.w = y.shape[:2]
        self.sl = lay.slice(j)
        self.c = lay.sizes[j]
        self.widths = model.widths()[j]
        hf, fc, fl, fg = self.widths
        part = checkerboard_masks(self.h, self.w)
        self.anchor = part.anchor
        self.non_anchor_flat = part.non_anchor.reshape(-1)
        self.hyper = hyper_feat.reshape(self.h * self.w, -1)
        self.prev = y[:, :, lay.prefix(j)] if fc else None
        self.y_anchor_only = np.where(self.anchor[:, :, None], y[:, :, self.sl], 0.0) if fl else None
        n = self.h * self.w
        self.local = np.zeros((n, fl))
        self.has_local = np.zeros(n, dtype=bool)
        self.g1 = np.zeros((n, fl))
        self.has_g1 = np.zeros(n, dtype=bool)
        self.g2 = np.zeros((n, fl))
        self.has_g2 = np.zeros(n, dtype=bool)

    def _yx(self, rows):
        return np.stack(np.divmod(rows, self.w), axis=1)

    def _block(self, b):
        p = f"c{self.j}.att{b}."
        m = self.model
        return AttentionBlock(m.w(p + "q"), m.w(p + "k"), m.w(p + "v"), m.w(p + "o"))

    def local_rows(self, rows):
        need = rows[~self.has_local[rows]]
        if need.size:
            m = self.model
            p = f"c{self.j}."
            self.local[need] = local_rows(self.y_anchor_only, m.w(p + "lc.w"), m.w(p + "lc.b"), self._yx(need))
            self.has_local[need] = True
        return self.local[rows]

    def _window_members(self, rows, shifted):
        g = _grid(self.h, self.w, self.model.config.N, shifted)
        mem = g.index[np.unique(g.win_of[rows])].reshape(-1)
        mem = mem[mem >= 0]
        return mem[self.non_anchor_flat[mem]]

    def _attn(self, src, rows, b, shifted):
        cfg = self.model.config
        A, sigma = self.model.w(f"c{self.j}.pe")
        field_ = src.reshape(self.h, self.w, -1)
        key_mask = self.non_anchor_flat.reshape(self.h, self.w)
        return windowed_attention(field_, key_mask, self._block(b), A, sigma, cfg.N, shifted, rows=rows)

    def g1_rows(self, rows):
        need = rows[~self.has_g1[rows]]
        if need.size:
            self.local_rows(self._window_members(need, False))
            self.g1[need] = self._attn(self.local, need, 0, False)
            self.has_g1[need] = True
        return self.g1[rows]

    def g2_rows(self, rows):
        need = rows[~self.has_g2[rows]]
        if need.size:
            self.g1_rows(self._window_members(need, True))
            self.g2[need] = self._attn(self.g1, need, 1, True)
            self.has_g2[need] = True
        return self.g2[rows]

    def prepare_spatial(self, rows, threads, pool):
        """Fill the spatial caches for ``rows`` with thread blocks (non-anchor phase)."""
        _, _, fl, fg = self.widths
        if not fl:
            return
        all_na = np.flatnonzero(self.non_anchor_flat)
        _map_rows(self.local_rows, all_na, threads, pool)
        if fg:
            _map_rows(self.g1_rows, all_na, threads, pool)
            _map_rows(self.g2_rows, rows, threads, pool)

    def features(self, rows, phase):
        hf, fc, fl, fg = self.widths
        parts = [self.hyper[rows]]
        if fc:
            m = self.model
            p = f"c{self.j}."
            parts.append(conv_rows(self.prev, m.w(p + "cc.w"), m.w(p + "cc.b"), self._yx(rows)))
        if fl:
            if phase == "anchor":
                parts.append(np.zeros((rows.size, fl + fg)))
            else:
                parts.append(self.local_rows(rows))
                if fg:
                    parts.append(self.g2_rows(rows))
        return np.concatenate(parts, axis=1)

    def params(self, rows, phase):
        m = self.model
        p = f"c{self.j}."
        x = self.features(rows, phase)
        hid = _relu(det_linear(x, m.w(p + "head1.w"), m.w(p + "head1.b")))
        out = det_linear(hid, m.w(p + "head2.w"), m.w(p + "head2.b"))
        mu = out[:, : self.c]
        sigma = np.maximum(det_softplus(out[:, self.c :]), SIGMA_FLOOR)
        return mu, sigma


# ----------------------------------------------------------------------------- init


def init_entropy_weights(
    config: EntropyConfig,
    seed=0,
    hyper_width=None,
    hyper_features=32,
    ctx_width=32,
    local_width=32,
    attn_dim=16,
    head_width=64,
):
    """Deterministic random weights (Philox); scales keep sigma in a sane range."""
    rng = make_rng(seed)
    cfg = config
    lay = cfg.layout
    hw = hyper_width or cfg.C_z

    def rnd(shape, fan_in, gain=1.0):
        return rng.standard_normal(shape) * gain / np.sqrt(max(fan_in, 1))

    w = {}
    if cfg.has("hyper"):
        w["ha1.w"] = rnd((3, 3, cfg.M, hw), 9 * cfg.M, 2.0)
        w["ha1.b"] = np.zeros(hw)
        w["ha2.w"] = rnd((3, 3, hw, cfg.C_z), 9 * hw, 2.0)
        w["ha2.b"] = np.zeros(cfg.C_z)
        w["hs1.w"] = rnd((3, 3, cfg.C_z, hw), 9 * cfg.C_z)
        w["hs1.b"] = np.zeros(hw)
        w["hs2.w"] = rnd((3, 3, hw, hyper_features), 9 * hw)
        w["hs2.b"] = np.zeros(hyper_features)
        w["zprior.mu"] = rng.normal(0, 0.5, cfg.C_z)
        w["zprior.sigma"] = rng.uniform(0.5, 3.0, cfg.C_z)
    hf = hyper_features if cfg.has("hyper") else 0
    for j, c in enumerate(lay.sizes):
        p = f"c{j}."
        fc = ctx_width if (cfg.has("channel") and j > 0) else 0
        fl = local_width if cfg.has("local") else 0
        fg = fl if cfg.has("global") else 0
        if fc:
            w[p + "cc.w"] = rnd((3, 3, lay.offsets[j], fc), 9 * lay.offsets[j])
            w[p + "cc.b"] = np.zeros(fc)
        if fl:
            w[p + "lc.w"] = rnd((5, 5, c, fl), 12 * c)
            w[p + "lc.b"] = np.zeros(fl)
        if fg:
            w[p + "pe"] = np.array([rng.uniform(0.5, 1.5), rng.uniform(0.5, 2.0)])
            for b in (0, 1):
                w[f"{p}att{b}.q"] = rnd((fl, attn_dim), fl)
                w[f"{p}att{b}.k"] = rnd((fl, attn_dim), fl)
                w[f"{p}att{b}.v"] = rnd((fl, attn_dim), fl)
                w[f"{p}att{b}.o"] = rnd((attn_dim, fl), attn_dim, 0.5)
        fin = hf + fc + fl + fg
        w[p + "head1.w"] = rnd((fin, head_width), fin)
        w[p + "head1.b"] = rng.normal(0, 0.1, head_width)
        w[p + "head2.w"] = rnd((head_width, 2 * c), head_width, 0.3)
        w[p + "head2.b"] = np.concatenate([np.zeros(c), np.full(c, 1.0)])
    return w
