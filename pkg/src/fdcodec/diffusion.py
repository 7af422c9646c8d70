"""Blurring diffusion in DCT space: forward noising, reverse (deblurring) steps.

A field ``x`` of shape ``(..., H, W, C)`` is diffused as

    z_t = V (alpha_vec(t) * V^T x) + sigma(t) * eps,

where the noise is isotropic, so it is drawn directly in pixel space.  The
denoiser predicts ``eps`` and every reverse step works on ``f = V^T z``.
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from ._validation import check_field, check_timestep, make_rng
from .schedules import ScheduleTable, posterior_params
from .spectral import DctPlan, dct2_forward, dct2_inverse

NOISE_MODES = ("fresh-noise", "paper-literal")


class Denoiser(Protocol):
    def __call__(self, z_t: np.ndarray, t: int, y_hat: np.ndarray | None) -> np.ndarray: ...


def _plan(table: ScheduleTable):
    h, w = table.shape
    return DctPlan(h, w)


def _spectral(arr, field):
    """Broadcast an (H, W) schedule array against ``field``."""
    return arr if field.ndim == 2 else arr[:, :, None]


def forward_sample(x, t, table: ScheduleTable, rng_seed):
    """Draw ``z_t ~ q(z_t | x)``; returns ``(z_t, eps)``."""
    t = check_timestep(t, table.T)
    x = check_field(x, "x")
    plan = _plan(table)
    rng = make_rng(rng_seed)
    eps = rng.standard_normal(x.shape)
    fx = dct2_forward(x, plan)
    z = dct2_inverse(_spectral(table.alpha_vec(t), x) * fx, plan) + table.sigma[t] * eps
    return z, eps


def predict_x(z_t, t, eps_hat, table: ScheduleTable):
    """Invert the reparameterisation: ``x_hat = V (V^T z_t - sigma_t V^T eps_hat) / alpha_vec``."""
    t = check_timestep(t, table.T, lo=1)
    plan = _plan(table)
    f_t = dct2_forward(z_t, plan)
    f_eps = dct2_forward(eps_hat, plan)
    return dct2_inverse((f_t - table.sigma[t] * f_eps) / _spectral(table.alpha_vec_safe(t), f_t), plan)


def ancestral_step(
    z_t,
    t,
    eps_hat,
    table: ScheduleTable,
    rng_seed=None,
    noise_mode="fresh-noise",
    clip_denoised=False,
):
    """One reverse step ``z_t -> z_{t-1}``.

    ``fresh-noise`` adds ``sigma_post * V^T eps'`` with new Gaussian noise;
    ``paper-literal`` adds ``sigma_post * V^T eps_hat`` instead, reusing the
    prediction as the stochastic term.  ``clip_denoised`` clamps the implied
    clean image to [-1, 1] before forming the mean (image decoding only).
    """
    t = check_timestep(t, table.T, lo=1)
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {noise_mode!r}")
    plan = _plan(table)
    z_t = np.asarray(z_t, dtype=np.float64)
    f_t = dct2_forward(z_t, plan)
    f_eps = dct2_forward(eps_hat, plan)
    mu_ft, mu_fx, sigma_post = (_spectral(a, z_t) for a in posterior_params(table, t))
    alpha_t = _spectral(table.alpha_vec_safe(t), z_t)

    if clip_denoised:
        x_hat = np.clip(dct2_inverse((f_t - table.sigma[t] * f_eps) / alpha_t, plan), -1.0, 1.0)
        mean = mu_ft * f_t + mu_fx * dct2_forward(x_hat, plan)
    else:
        # sigma^2_{t|t-1} / (alpha_{t|t-1} sigma_t^2) == mu_fx / alpha_vec(t)
        mean = mu_ft * f_t + (mu_fx / alpha_t) * (f_t - table.sigma[t] * f_eps)

    if noise_mode == "fresh-noise":
        if rng_seed is None:
            raise ValueError("fresh-noise mode needs rng_seed")
        noise = dct2_forward(make_rng(rng_seed).standard_normal(z_t.shape), plan)
    else:
        noise = f_eps
    return dct2_inverse(mean + sigma_post * noise, plan)


def decode_image(
    y_hat,
    denoiser: Denoiser,
    table: ScheduleTable,
    rng_seed,
    noise_mode="fresh-noise",
    shape=None,
    clip_denoised=False,
    callback: Callable[[int, np.ndarray], None] | None = None,
):
    """Ancestral sampling from ``z_T ~ N(0, I)`` down to ``z_0``.

    ``shape`` is the full field shape; by default ``(H, W, 1)`` from the
    schedule grid.  A single Philox stream supplies ``z_T`` and then the
    per-step noise, in order, so output depends only on the seed.
    """
    h, w = table.shape
    shape = tuple(shape) if shape is not None else (h, w, 1)
    rng = make_rng(rng_seed)
    z = rng.standard_normal(shape)
    for t in range(table.T, 0, -1):
        eps_hat = np.asarray(denoiser(z, t, y_hat), dtype=np.float64)
        if eps_hat.shape != z.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {z.shape}")
        if not np.all(np.isfinite(eps_hat)):
            raise FloatingPointError(f"denoiser produced non-finite output at t={t}")
        z = ancestral_step(z, t, eps_hat, table, rng, noise_mode, clip_denoised)
        if callback is not None:
            callback(t - 1, z)
    return z


def simplified_loss(x, t, eps, eps_hat):
    """Mean squared noise-prediction error (``x`` and ``t`` kept for signature parity)."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


def oracle_denoiser(variance_spectrum, table: ScheduleTable) -> Denoiser:
    """Bayes-optimal noise predictor for a zero-mean Gaussian source.

    ``variance_spectrum`` gives the variance of each DCT coefficient of the
    data (broadcastable to the field).  Per frequency the posterior mean of
    the noise is ``sigma_t f_t / (alpha_vec^2 v + sigma_t^2)``.
    """
    v = np.asarray(variance_spectrum, dtype=np.float64)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("variance spectrum must be positive and finite")
    plan = _plan(table)

    def denoise(z_t, t, y_hat=None):
        f_t = dct2_forward(z_t, plan)
        a = _spectral(table.alpha_vec(t), f_t)
        s = table.sigma[t]
        vv = v[:, :, None] if (v.ndim == 2 and f_t.ndim > 2) else v
        return dct2_inverse(s * f_t / (a * a * vv + s * s), plan)

    return denoise
