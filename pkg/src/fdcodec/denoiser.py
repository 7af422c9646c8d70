"""Toy conditional noise predictor with hand-written backprop and Adam.

Architecture::

    h1 = relu(conv1(concat(z_t, up16(y))) + e(t) @ Wt)
    h2 = relu(conv2(h1))
    eps_hat = conv3(h2)

All convolutions are 3x3, stride 1, zero padded ("same").  Tensors are
channel-last: ``(B, H, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator

from ._validation import check_positive_int, make_rng
from .diffusion import forward_sample
from .schedules import ScheduleConfig, ScheduleTable, build_schedule
from .spectral import frequency_grid

EMBED_DIM = 64
UPSAMPLE = 16
# angular frequencies applied to t/T; the lowest is 1 so sin() alone is injective on [0, 1]
EMBED_FREQS = np.exp(np.linspace(0.0, math.log(1000.0), EMBED_DIM // 2))

PARAM_NAMES = ("w1", "b1", "wt", "w2", "b2", "w3", "b3")


def embed_time(t, T):
    """64-d sinusoidal embedding ``[sin(w_k t/T), cos(w_k t/T)]``."""
    T = check_positive_int(T, "T")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ValueError(f"t must lie in [0, {T}]")
    ang = (t_arr[..., None] / T) * EMBED_FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_params(img_channels, cond_channels, features=32, seed=0):
    """He-style init; the output layer starts small so initial eps_hat ~ 0."""
    rng = make_rng(seed)
    cin = img_channels + cond_channels

    def he(shape, fan_in, gain=1.0):
        return rng.standard_normal(shape) * gain * math.sqrt(2.0 / fan_in)

    return {
        "w1": he((3, 3, cin, features), 9 * cin),
        "b1": np.zeros(features),
        "wt": he((EMBED_DIM, features), EMBED_DIM, 0.5),
        "w2": he((3, 3, features, features), 9 * features),
        "b2": np.zeros(features),
        "w3": he((3, 3, features, img_channels), 9 * features, 0.1),
        "b3": np.zeros(img_channels),
    }


def check_params(params):
    missing = [k for k in PARAM_NAMES if k not in params]
    if missing:
        raise ValueError(f"missing denoiser parameters: {missing}")
    p = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}
    f = p["w1"].shape[3]
    c_img = p["w3"].shape[3]
    expect = {
        "b1": (f,),
        "wt": (EMBED_DIM, f),
        "w2": (3, 3, f, f),
        "b2": (f,),
        "w3": (3, 3, f, c_img),
        "b3": (c_img,),
    }
    if p["w1"].shape[:2] != (3, 3) or p["w1"].ndim != 4:
        raise ValueError(f"w1 must be 3x3xCinxF, got {p['w1'].shape}")
    for k, shp in expect.items():
        if p[k].shape != shp:
            raise ValueError(f"{k} has shape {p[k].shape}, expected {shp}")
    for k, v in p.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"parameter {k} is not finite")
    return p


def _im2col(x):
    """(B, H, W, C) -> (B, H, W, 9*C) patches of the zero-padded input."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B, H, W, C, 3, 3
    b, h, w, c = x.shape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, 9 * c)


def _col2im(cols, c):
    """Adjoint of ``_im2col``."""
    b, h, w, _ = cols.shape
    cols = cols.reshape(b, h, w, 3, 3, c)
    out = np.zeros((b, h + 2, w + 2, c))
    for dy in range(3):
        for dx in range(3):
            out[:, dy : dy + h, dx : dx + w] += cols[:, :, :, dy, dx]
    return out[:, 1:-1, 1:-1]


def _conv(x, w, b=None):
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[3])
    if b is not None:
        out = out + b
    return out, cols


def upsample_cond(y, shape_hw):
    """Nearest-neighbour x16 upsampling of ``y`` (B, h, w, Cc) to ``shape_hw``."""
    up = np.repeat(np.repeat(y, UPSAMPLE, axis=1), UPSAMPLE, axis=2)
    if up.shape[1:3] != tuple(shape_hw):
        raise ValueError(
            f"conditioning {y.shape[1:3]} x{UPSAMPLE} gives {up.shape[1:3]}, field is {tuple(shape_hw)}"
        )
    return up


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        return z[None], True
    if z.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got shape {z.shape}")
    return z, False


def _cond_conv(y, w_y, shape_hw):
    """3x3 'same' conv of the x16 nearest-upsampled ``y``, computed per tap.

    Upsampling commutes with the 1x1 projection of each tap, so each tap is
    projected at latent resolution, upsampled, and shift-added.  Exactly the
    convolution of the upsampled field, without materialising it.
    """
    h, w = shape_hw
    b = y.shape[0]
    out = np.zeros((b, h, w, w_y.shape[3]))
    for dy in range(3):
        for dx in range(3):
            up = upsample_cond(y @ w_y[dy, dx], (h, w))
            upp = np.pad(up, ((0, 0), (1, 1), (1, 1), (0, 0)))
            out += upp[:, dy : dy + h, dx : dx + w]
    return out


def _cond_conv_grad(y, g, c_cond):
    """Gradient of ``sum(g * _cond_conv(y, w_y))`` with respect to ``w_y``."""
    b, h, w, f = g.shape
    lh, lw = h // UPSAMPLE, w // UPSAMPLE
    grad = np.zeros((3, 3, c_cond, f))
    for dy in range(3):
        for dx in range(3):
            gs = np.zeros((b, h + 2, w + 2, f))
            gs[:, dy : dy + h, dx : dx + w] = g
            inner = gs[:, 1 : h + 1, 1 : w + 1]
            blocks = inner.reshape(b, lh, UPSAMPLE, lw, UPSAMPLE, f).sum(axis=(2, 4))
            grad[dy, dx] = np.tensordot(y, blocks, axes=([0, 1, 2], [0, 1, 2]))
    return grad


def denoiser_forward(params, z_t, t, y_cond, T, return_cache=False):
    p = check_params(params)
    z, squeeze = _as_batch(z_t)
    b, h, w, c = z.shape
    if c != p["w3"].shape[3]:
        raise ValueError(f"z_t has {c} channels, model expects {p['w3'].shape[3]}")
    c_cond = p["w1"].shape[2] - c
    y = None
    if c_cond > 0:
        if y_cond is None:
            raise ValueError("model expects conditioning but y_cond is None")
        y, _ = _as_batch(y_cond)
        if y.shape[0] == 1 and b > 1:
            y = np.broadcast_to(y, (b,) + y.shape[1:])
        if y.shape[0] != b or y.shape[3] != c_cond:
            raise ValueError(f"y_cond shape {y.shape} incompatible with batch {b} and {c_cond} channels")
        if (y.shape[1] * UPSAMPLE, y.shape[2] * UPSAMPLE) != (h, w):
            raise ValueError(f"conditioning {y.shape[1:3]} x{UPSAMPLE} does not match field {(h, w)}")
    t_arr = np.broadcast_to(np.asarray(t), (b,))
    emb = embed_time(t_arr, T)  # (B, 64)

    a1, cols1 = _conv(z, p["w1"][:, :, :c], p["b1"])
    if y is not None:
        a1 = a1 + _cond_conv(y, p["w1"][:, :, c:], (h, w))
    a1 = a1 + (emb @ p["wt"])[:, None, None, :]
    h1 = np.maximum(a1, 0.0)
    a2, cols2 = _conv(h1, p["w2"], p["b2"])
    h2 = np.maximum(a2, 0.0)
    out, cols3 = _conv(h2, p["w3"], p["b3"])
    if return_cache:
        cache = dict(p=p, emb=emb, cols1=cols1, y=y, a1=a1, cols2=cols2, a2=a2, cols3=cols3)
        return out, cache
    return out[0] if squeeze else out


def denoiser_backward(cache, eps_hat, eps):
    """Gradients of ``mean((eps_hat - eps)^2)`` w.r.t. every parameter."""
    p = cache["p"]
    g_out = 2.0 * (eps_hat - eps) / eps.size
    grads = {}
    grads["b3"] = g_out.sum(axis=(0, 1, 2))
    grads["w3"] = np.tensordot(cache["cols3"], g_out, axes=([0, 1, 2], [0, 1, 2])).reshape(p["w3"].shape)
    g_h2 = _col2im(g_out @ p["w3"].reshape(-1, p["w3"].shape[3]).T, p["w3"].shape[2])
    g_a2 = g_h2 * (cache["a2"] > 0)
    grads["b2"] = g_a2.sum(axis=(0, 1, 2))
    grads["w2"] = np.tensordot(cache["cols2"], g_a2, axes=([0, 1, 2], [0, 1, 2])).reshape(p["w2"].shape)
    g_h1 = _col2im(g_a2 @ p["w2"].reshape(-1, p["w2"].shape[3]).T, p["w2"].shape[2])
    g_a1 = g_h1 * (cache["a1"] > 0)
    grads["b1"] = g_a1.sum(axis=(0, 1, 2))
    c = p["w3"].shape[3]
    g_w1 = np.tensordot(cache["cols1"], g_a1, axes=([0, 1, 2], [0, 1, 2])).reshape((3, 3, c, -1))
    if cache["y"] is not None:
        g_w1 = np.concatenate([g_w1, _cond_conv_grad(cache["y"], g_a1, p["w1"].shape[2] - c)], axis=2)
    grads["w1"] = g_w1
    grads["wt"] = cache["emb"].T @ g_a1.sum(axis=(1, 2))
    return grads


def loss_and_grad(params, z_t, t, y_cond, eps, T):
    eps = np.asarray(eps, dtype=np.float64)
    out, cache = denoiser_forward(params, z_t, t, y_cond, T, return_cache=True)
    if out.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match output {out.shape}")
    return float(np.mean((out - eps) ** 2)), denoiser_backward(cache, out, eps)


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params, grads):
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


# ----------------------------------------------------------------------------- data


def gaussian_blobs(n, size=16, channels=1, seed=0, max_blobs=3):
    """Fixed synthetic dataset: sums of random isotropic Gaussian bumps in [-1, 1]."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((n, size, size, channels))
    for i in range(n):
        for c in range(channels):
            img = np.zeros((size, size))
            for _ in range(int(rng.integers(1, max_blobs + 1))):
                cy, cx = rng.uniform(0, size, 2)
                s = rng.uniform(1.5, size / 3)
                amp = rng.uniform(-1, 1)
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            out[i, :, :, c] = img
    return np.clip(out, -1.0, 1.0)


def block_mean_encoder(x):
    """Stand-in analysis transform for toy training: 16x16 block means, scaled by 4."""
    x = np.asarray(x, dtype=np.float64)
    b, h, w, c = x.shape
    if h % UPSAMPLE or w % UPSAMPLE:
        raise ValueError(f"toy encoder needs sizes divisible by {UPSAMPLE}, got {h}x{w}")
    blocks = x.reshape(b, h // UPSAMPLE, UPSAMPLE, w // UPSAMPLE, UPSAMPLE, c)
    return 4.0 * blocks.mean(axis=(2, 4))


def unit_gaussian_rate(y_noisy):
    """-log2 p(y~) under a unit Gaussian convolved with U(-1/2, 1/2), in bits per image."""
    from scipy.special import ndtr

    y = np.asarray(y_noisy, dtype=np.float64)
    p = np.maximum(ndtr(y + 0.5) - ndtr(y - 0.5), 1e-12)
    return float(-np.sum(np.log2(p)) / y.shape[0])


@dataclass
class ToyTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    features: int = 32
    lr: float = 1e-4
    lam: float = 0.0
    seed: int = 0
    T: int = 500
    sigma_b_max: float = 25.0
    d_min: float = 0.001
    n_probe: int = 64
    eval_every: int = 100


def _draw_batch(x, table, rng, encoder, batch_size):
    idx = rng.integers(0, x.shape[0], batch_size)
    xb = x[idx]
    y = encoder(xb)
    y_noisy = y + rng.uniform(-0.5, 0.5, y.shape)
    t = rng.integers(1, table.T + 1, batch_size)
    z = np.empty_like(xb)
    eps = np.empty_like(xb)
    for i in range(batch_size):
        z[i], eps[i] = forward_sample(xb[i], int(t[i]), table, rng)
    return xb, y_noisy, t, z, eps


def probe_loss(params, probe, T):
    _, y, t, z, eps = probe
    out = denoiser_forward(params, z, t, y, T)
    return float(np.mean((out - eps) ** 2))


def train_toy(data, config: ToyTrainConfig, encoder=block_mean_encoder, params=None, table=None):
    """Minibatch eps-MSE training with Adam; returns ``(params, trace)``.

    ``trace`` holds per-step training loss (``loss``, which includes the rate
    term when ``lam > 0``), its eps-MSE part (``mse``) and the loss on a fixed
    probe set every ``eval_every`` steps (``probe``, list of (step, value)).
    The rate term depends only on the (fixed) encoder, so it contributes to
    the reported loss but has no gradient with respect to the denoiser.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"data must be (N, H, W, C), got {x.shape}")
    if table is None:
        cfg = ScheduleConfig(config.T, config.sigma_b_max, config.d_min)
        table = build_schedule(cfg, frequency_grid(x.shape[2], x.shape[1]))
    rng = make_rng(config.seed)
    cond_channels = encoder(x[:1]).shape[-1]
    if params is None:
        params = init_params(x.shape[-1], cond_channels, config.features, seed=int(rng.integers(2**31)))
    params = {k: np.array(v, dtype=np.float64) for k, v in check_params(params).items()}
    probe_rng = make_rng(config.seed + 7919)
    probe = _draw_batch(x, table, probe_rng, encoder, config.n_probe)

    opt = Adam(lr=config.lr)
    trace = {"loss": [], "mse": [], "probe": [(0, probe_loss(params, probe, table.T))]}
    for step in range(1, config.steps + 1):
        _, y, t, z, eps = _draw_batch(x, table, rng, encoder, config.batch_size)
        mse, grads = loss_and_grad(params, z, t, y, eps, table.T)
        loss = mse + (config.lam * unit_gaussian_rate(y) if config.lam else 0.0)
        if not math.isfinite(loss):
            raise FloatingPointError(
                f"training diverged at step {step}: loss={loss}, lr={config.lr}; "
                "lower the learning rate or check the data range"
            )
        trace["loss"].append(loss)
        trace["mse"].append(mse)
        params = opt.update(params, grads)
        if step % config.eval_every == 0 or step == config.steps:
            trace["probe"].append((step, probe_loss(params, probe, table.T)))
    return params, trace


class ToyDenoiser(BaseEstimator):
    """Estimator wrapper: ``fit`` trains, ``predict`` returns eps_hat.

    Instances are callable with the ``(z_t, t, y_hat)`` denoiser contract
    used by :func:`fdcodec.diffusion.decode_image`.
    """

    def __init__(
        self,
        features=32,
        T=500,
        sigma_b_max=25.0,
        d_min=0.001,
        steps=2000,
        batch_size=8,
        lr=1e-4,
        lam=0.0,
        seed=0,
    ):
        self.features = features
        self.T = T
        self.sigma_b_max = sigma_b_max
        self.d_min = d_min
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lam = lam
        self.seed = seed

    def _config(self):
        return ToyTrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            features=self.features,
            lr=self.lr,
            lam=self.lam,
            seed=self.seed,
            T=self.T,
            sigma_b_max=self.sigma_b_max,
            d_min=self.d_min,
        )

    def fit(self, X, y=None):
        self.params_, self.trace_ = train_toy(X, self._config())
        self.n_channels_ = np.asarray(X).shape[-1]
        return self

    def predict(self, z_t, t, y_cond=None):
        if not hasattr(self, "params_"):
            raise AttributeError("ToyDenoiser is not fitted")
        return denoiser_forward(self.params_, z_t, t, y_cond, self.T)

    def __call__(self, z_t, t, y_hat=None):
        return self.predict(z_t, t, y_hat)

    def schedule(self, height, width) -> ScheduleTable:
        return build_schedule(ScheduleConfig(self.T, self.sigma_b_max, self.d_min), frequency_grid(width, height))
