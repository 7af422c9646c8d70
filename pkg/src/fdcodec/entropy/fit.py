"""Hand-structured context weights plus least-squares (mu, sigma) heads.

The context stages get fixed, interpretable weights: the hyperprior smooths
and downsamples each channel; the channel context exposes the 3x3
neighbourhood of every earlier channel; the local context exposes the 12
anchor taps plus a non-anchor indicator; attention averages local features
of window neighbours through the Laplacian bias alone (Q = K = 0).  Only the
head is fitted, per chunk and phase, by linear least squares.  The head is a
two-layer ReLU net, so linear maps are written as ``relu(f) - relu(-f)``
with units gated on or off by the indicator.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator

from ..coder import SIGMA_FLOOR, cross_entropy_bits, discretize_gaussian
from .layout import PHASES, checkerboard_masks
from .model import LOCAL_TAPS, EntropyConfig, EntropyModel

GATE = 1.0e4
_SMOOTH = np.array([0.25, 0.5, 0.25])
QUANT_VAR = 1.0 / 12.0


def _smooth3():
    return np.outer(_SMOOTH, _SMOOTH)


def _softplus_inv(s):
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


def structured_weights(config: EntropyConfig, hyper_gain=2.0, pe=(1.0, 1.0)):
    """Context weights for every enabled stage; heads are zero placeholders."""
    M, lay = config.M, config.layout
    w = {}
    hf = 0
    if config.has("hyper"):
        if config.C_z != M:
            raise ValueError("structured hyperprior needs C_z == M")
        k = _smooth3()
        ha1 = np.zeros((3, 3, M, 2 * M))
        ha2 = np.zeros((3, 3, 2 * M, M))
        hs1 = np.zeros((3, 3, M, 2 * M))
        hs2 = np.zeros((3, 3, 2 * M, 2 * M))
        inv = 1.0 / hyper_gain if hyper_gain else 0.0
        for c in range(M):
            ha1[:, :, c, c], ha1[:, :, c, M + c] = k, -k
            ha2[:, :, c, c], ha2[:, :, M + c, c] = hyper_gain * k, -hyper_gain * k
            hs1[1, 1, c, c], hs1[1, 1, c, M + c] = inv, -inv
            # nearest-upsampled and smoothed copies of the decoded block mean
            hs2[1, 1, c, c], hs2[1, 1, M + c, c] = 1.0, -1.0
            hs2[:, :, c, M + c], hs2[:, :, M + c, M + c] = k, -k
        w.update(
            {
                "ha1.w": ha1, "ha1.b": np.zeros(2 * M),
                "ha2.w": ha2, "ha2.b": np.zeros(M),
                "hs1.w": hs1, "hs1.b": np.zeros(2 * M),
                "hs2.w": hs2, "hs2.b": np.zeros(2 * M),
                "zprior.mu": np.zeros(M), "zprior.sigma": np.ones(M),
            }
        )
        hf = 2 * M
    for j, c in enumerate(lay.sizes):
        p = f"c{j}."
        fc = 0
        if config.has("channel") and j > 0:
            off = lay.offsets[j]
            fc = 9 * off
            cc = np.zeros((3, 3, off, fc))
            for (dy, dx), ci in itertools.product(itertools.product(range(3), range(3)), range(off)):
                cc[dy, dx, ci, (dy * 3 + dx) * off + ci] = 1.0
            w[p + "cc.w"], w[p + "cc.b"] = cc, np.zeros(fc)
        fl = fg = 0
        if config.has("local"):
            base = len(LOCAL_TAPS) * c + 1
            # with attention, three more zero blocks receive the attended copies
            fl = 4 * base if config.has("global") else base
            lc = np.zeros((5, 5, c, fl))
            for t, (dy, dx) in enumerate(LOCAL_TAPS):
                for ci in range(c):
                    lc[dy + 2, dx + 2, ci, t * c + ci] = 1.0
            lb = np.zeros(fl)
            lb[base - 1] = 1.0  # non-anchor indicator
            w[p + "lc.w"], w[p + "lc.b"] = lc, lb
        if config.has("global"):
            fg = fl
            w[p + "pe"] = np.array(pe, dtype=np.float64)
            blk = [slice(i * base, (i + 1) * base) for i in range(4)]
            eye = np.eye(base)
            # block 0: x -> slot 1; block 1: x -> slot 2 and slot 1 -> slot 3
            v0, v1 = np.zeros((fl, fl)), np.zeros((fl, fl))
            v0[blk[0], blk[1]] = eye
            v1[blk[0], blk[2]] = eye
            v1[blk[1], blk[3]] = eye
            for b, v in ((0, v0), (1, v1)):
                w[f"{p}att{b}.q"] = np.zeros((fl, 1))
                w[f"{p}att{b}.k"] = np.zeros((fl, 1))
                w[f"{p}att{b}.v"] = v
                w[f"{p}att{b}.o"] = np.eye(fl)
        F = hf + fc + fl + fg
        units = 4 * F + 2 if fl else 2 * F + 1
        w[p + "head1.w"] = np.zeros((F, units))
        w[p + "head1.b"] = np.zeros(units)
        w[p + "head2.w"] = np.zeros((units, 2 * c))
        w[p + "head2.b"] = np.concatenate([np.zeros(c), np.full(c, _softplus_inv(1.0))])
    return w


def _columns(widths):
    """Informative feature columns per phase, and the indicator column.

    Anchors see only hyper and channel features.  Non-anchors add the local
    taps and, with attention, the three attended slots; always-zero slots,
    the duplicate of the local taps and the indicator copies are skipped.
    """
    hf, fc, fl, fg = widths
    shared = list(range(hf + fc))
    if not fl:
        return shared, shared, None
    base = fl // 4 if fg else fl
    ind = hf + fc + base - 1
    cols = shared + list(range(hf + fc, ind))
    for slot in range(1, 4) if fg else ():
        start = hf + fc + fl + slot * base
        cols += list(range(start, start + base - 1))
    return cols, shared, ind


def _gated_head(F, ind, cols_na, cols_a, lin_na, lin_a, raw_na, raw_a):
    """Head weights computing one affine map per phase, selected by feature ``ind``.

    ``lin_*`` is (len(cols_*) + 1, c): weights then intercept; ``raw_*`` (c,)
    is the pre-softplus sigma of that phase.  Units are
    ``relu(+-f - GATE * (1 - ind))`` for non-anchors,
    ``relu(+-f - GATE * ind)`` for anchors, then ``relu(ind)``, ``relu(1 - ind)``.
    """
    c = lin_na.shape[1]
    na, an = len(cols_na), len(cols_a)
    U = 2 * na + 2 * an + 2
    w1 = np.zeros((F, U))
    b1 = np.zeros(U)
    w2 = np.zeros((U, 2 * c))
    u = 0
    for cols, lin, gate, off in ((cols_na, lin_na, GATE, -GATE), (cols_a, lin_a, -GATE, 0.0)):
        for sign in (1.0, -1.0):
            for k, col in enumerate(cols):
                w1[col, u] += sign
                w1[ind, u] += gate
                b1[u] = off
                w2[u, :c] = sign * lin[k]
                u += 1
    w1[ind, u], w2[u, :c], w2[u, c:] = 1.0, lin_na[-1], raw_na
    w1[ind, u + 1], b1[u + 1], w2[u + 1, :c], w2[u + 1, c:] = -1.0, 1.0, lin_a[-1], raw_a
    return w1, b1, w2, np.zeros(2 * c)


def _plain_head(F, lin, raw):
    c = lin.shape[1]
    U = 2 * F + 1
    w1 = np.zeros((F, U))
    b1 = np.zeros(U)
    w1[:, :F], w1[:, F : 2 * F] = np.eye(F), -np.eye(F)
    b1[2 * F] = 1.0
    w2 = np.zeros((U, 2 * c))
    w2[:F, :c], w2[F : 2 * F, :c] = lin[:F], -lin[:F]
    w2[2 * F, :c] = lin[F]
    w2[2 * F, c:] = raw
    return w1, b1, w2, np.zeros(2 * c)


def _lstsq(X, Y, ridge):
    Xa = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    if ridge:
        G = Xa.T @ Xa + ridge * np.diag(np.r_[np.ones(X.shape[1]), 0.0])
        coef = np.linalg.lstsq(G, Xa.T @ Y, rcond=None)[0]
    else:
        coef = np.linalg.lstsq(Xa, Y, rcond=None)[0]
    resid = Y - Xa @ coef
    sigma = np.sqrt(np.maximum(np.mean(resid**2, axis=0) - QUANT_VAR, SIGMA_FLOOR**2))
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    return coef, sigma, _gauss_bits(resid, sigma)


def _gauss_bits(resid, sigma):
    """Approximate code length of integer targets with residuals ``resid`` (plain float math)."""
    p = ndtr((resid + 0.5) / sigma) - ndtr((resid - 0.5) / sigma)
    return float(-np.sum(np.log2(np.maximum(p, 2.0**-16))))


def _features(model, latents, j, phase):
    """Stack head inputs and targets of chunk ``j`` / ``phase`` over training latents."""
    X, Y = [], []
    sl = model.config.layout.slice(j)
    for y in latents:
        z = model.hyper_analysis(y) if model.config.has("hyper") else None
        hf = model.hyper_features(z, y.shape[:2])
        st = model.chunk_state(y, hf, j)
        rows = np.flatnonzero(checkerboard_masks(*y.shape[:2]).mask(phase).reshape(-1))
        if phase == "non_anchor":
            st.prepare_spatial(rows, 1, None)
        X.append(st.features(rows, phase))
        Y.append(y.reshape(-1, y.shape[2])[rows, sl])
    return np.concatenate(X), np.concatenate(Y)


def fit_heads(model: EntropyModel, latents, ridge=1e-3, return_bits=False):
    """Least-squares fit of every head (and the z prior) on training latents.

    Returns a new model whose context stages are untouched.  With
    ``return_bits`` also returns an approximate training code length, cheap
    enough for hyperparameter search.
    """
    cfg = model.config
    w = dict(model.weights)
    latents = [np.asarray(y, dtype=np.float64) for y in latents]
    bits = 0.0
    if cfg.has("hyper"):
        zs = np.concatenate([model.hyper_analysis(y).reshape(-1, cfg.C_z) for y in latents])
        w["zprior.mu"] = zs.mean(axis=0)
        w["zprior.sigma"] = np.maximum(np.sqrt(np.maximum(zs.var(axis=0) - QUANT_VAR, 0.0)), SIGMA_FLOOR)
        bits += _gauss_bits(zs - w["zprior.mu"], w["zprior.sigma"])
    for j, (hf, fc, fl, fg) in enumerate(model.widths()):
        F = hf + fc + fl + fg
        p = f"c{j}."
        if fl:
            cols = dict(zip(("non_anchor", "anchor"), _columns((hf, fc, fl, fg))))
            ind = _columns((hf, fc, fl, fg))[2]
            fits = {}
            for phase in PHASES:
                X, Y = _features(model, latents, j, phase)
                fits[phase] = _lstsq(X[:, cols[phase]], Y, ridge)
            (ln, sn, bn), (la, sa, ba) = fits["non_anchor"], fits["anchor"]
            bits += bn + ba
            head = _gated_head(F, ind, cols["non_anchor"], cols["anchor"], ln, la, _softplus_inv(sn), _softplus_inv(sa))
        else:
            Xs, Ys = zip(*(_features(model, latents, j, ph) for ph in PHASES))
            lin, s, b = _lstsq(np.concatenate(Xs), np.concatenate(Ys), ridge)
            bits += b
            head = _plain_head(F, lin, _softplus_inv(s))
        for name, arr in zip(("head1.w", "head1.b", "head2.w", "head2.b"), head):
            w[p + name] = arr
    fitted = EntropyModel(cfg, w)
    return (fitted, bits) if return_bits else fitted


def model_bits(model: EntropyModel, y_hat):
    """Ideal code length of one latent under ``model`` (bits), z side information included."""
    total = 0.0
    z = None
    if model.config.has("hyper"):
        z = model.hyper_analysis(y_hat)
        mu, sg = model.z_params(z.shape)
        total += cross_entropy_bits(z.reshape(-1), discretize_gaussian(mu, sg))
    flat = y_hat.reshape(-1, y_hat.shape[2])
    lay = model.config.layout
    for (j, _), (rows, mu, sg) in model.all_params(y_hat, z).items():
        total += cross_entropy_bits(flat[rows][:, lay.slice(j)].reshape(-1), discretize_gaussian(mu.reshape(-1), sg.reshape(-1)))
    return total


class ContextEntropyModel(BaseEstimator):
    """Structured context model with least-squares heads.

    ``fit`` takes integer latents (n, h, w, M).  The hyperprior gain and the
    Laplacian (A, sigma) are picked from small grids by training code length.
    """

    def __init__(
        self,
        M=12,
        N=4,
        contexts=("hyper", "channel", "local", "global"),
        hyper_gains=(0.0, 0.5, 1.0, 2.0),
        pe_grid=((0.0, 1.0), (1.0, 0.5), (1.0, 1.0), (2.0, 1.0), (2.0, 2.0)),
        ridge=1e-3,
    ):
        self.M = M
        self.N = N
        self.contexts = contexts
        self.hyper_gains = hyper_gains
        self.pe_grid = pe_grid
        self.ridge = ridge

    def _config(self):
        return EntropyConfig(M=self.M, C_z=self.M, N=self.N, contexts=tuple(self.contexts))

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[3] != self.M:
            raise ValueError(f"expected latents (n, h, w, {self.M}), got {X.shape}")
        if not np.array_equal(X, np.rint(X)):
            raise ValueError("latents must be integer-valued")
        cfg = self._config()
        gains = self.hyper_gains if cfg.has("hyper") else (0.0,)
        pes = self.pe_grid if cfg.has("global") else ((1.0, 1.0),)
        best = None
        for g, pe in itertools.product(gains, pes):
            m, bits = fit_heads(EntropyModel(cfg, structured_weights(cfg, g, pe)), X, self.ridge, return_bits=True)
            if best is None or bits < best[0]:
                best = (bits, m, g, pe)
        self.train_bits_, self.model_, self.hyper_gain_, self.pe_ = best
        self.weights_ = self.model_.weights
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            raise AttributeError("ContextEntropyModel is not fitted")

    def predict(self, X):
        """Gaussian parameters ``{(chunk, phase): (rows, mu, sigma)}`` per latent."""
        self._check()
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 3
        out = []
        for y in [X] if single else X:
            z = self.model_.hyper_analysis(y) if self.model_.config.has("hyper") else None
            out.append(self.model_.all_params(y, z))
        return out[0] if single else out

    def score(self, X, y=None):
        """Negative ideal code length in bits per latent symbol (higher is better)."""
        self._check()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        return -sum(model_bits(self.model_, yi) for yi in X) / X.size
