"""Noise, blur and combined per-frequency schedules of the blurring diffusion.

Scalars (``alpha``, ``sigma``, ``sigma_blur``, ``tau``) are stored for every
integer t in ``[0, T]``; the per-frequency arrays are evaluated on demand so
a 500-step table over a 256x256 grid stays small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_timestep
from .spectral import FrequencyGrid

ALPHA_FLOOR = 1e-9


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 500
    sigma_b_max: float = 25.0
    d_min: float = 0.001

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if not self.sigma_b_max >= 0:
            raise ValueError("sigma_b_max must be nonnegative")
        if not 0.0 <= self.d_min < 1.0:
            raise ValueError("d_min must lie in [0, 1)")


class ScheduleTable:
    """Immutable schedule for one frequency grid."""

    def __init__(self, cfg: ScheduleConfig, grid: FrequencyGrid):
        self.cfg = cfg
        self.grid = grid
        T = cfg.T
        t = np.arange(T + 1, dtype=np.float64)
        phase = t * np.pi / (2 * T)
        alpha = np.cos(phase)
        alpha[0] = 1.0
        sigma = np.sqrt(np.maximum(1.0 - alpha**2, 0.0))
        sigma_blur = cfg.sigma_b_max * np.sin(phase) ** 2
        tau = sigma_blur**2 / 2.0
        for a in (alpha, sigma, sigma_blur, tau):
            a.setflags(write=False)
        self.alpha, self.sigma, self.sigma_blur, self.tau = alpha, sigma, sigma_blur, tau

    @property
    def T(self):
        return self.cfg.T

    @property
    def shape(self):
        return self.grid.shape

    def d(self, t):
        t = check_timestep(t, self.T)
        dmin = self.cfg.d_min
        return (1.0 - dmin) * np.exp(-self.grid.lam * self.tau[t]) + dmin

    def alpha_vec(self, t):
        return self.alpha[t] * self.d(t)

    def alpha_vec_safe(self, t):
        """``alpha_vec`` floored for use as a divisor (cos(pi/2) is ~6e-17)."""
        return np.maximum(self.alpha_vec(t), ALPHA_FLOOR)

    def alpha_step(self, t):
        t = check_timestep(t, self.T, lo=1)
        return self.alpha_vec(t) / self.alpha_vec(t - 1)

    def sigma2_step(self, t):
        t = check_timestep(t, self.T, lo=1)
        s2 = self.sigma[t] ** 2 - self.alpha_step(t) ** 2 * self.sigma[t - 1] ** 2
        # rounding guard only; genuine negatives would be a schedule bug
        return np.where((s2 < 0) & (s2 > -1e-15), 0.0, s2)


def build_schedule(cfg: ScheduleConfig, grid: FrequencyGrid) -> ScheduleTable:
    return ScheduleTable(cfg, grid)


def posterior_params(table: ScheduleTable, t):
    """Coefficients of q(f_{t-1} | f_t, f_x) per frequency.

    Returns ``(mu_coeff_ft, mu_coeff_fx, sigma_post)`` with
    ``mean = mu_coeff_ft * f_t + mu_coeff_fx * f_x``.
    """
    t = check_timestep(t, table.T, lo=1)
    a_step = table.alpha_step(t)
    s2_step = table.sigma2_step(t)
    s2_t = table.sigma[t] ** 2
    s2_prev = table.sigma[t - 1] ** 2
    mu_ft = a_step * s2_prev / s2_t
    mu_fx = table.alpha_vec(t - 1) * s2_step / s2_t
    sigma_post = np.sqrt(s2_step) * table.sigma[t - 1] / table.sigma[t]
    return mu_ft, mu_fx, sigma_post


def schedule_rows(table: ScheduleTable):
    """Yield one flat record per t: scalars followed by d(t) in row-major order."""
    for t in range(table.T + 1):
        yield [t, table.alpha[t], table.sigma[t], table.sigma_blur[t], table.tau[t], *table.d(t).ravel()]


def schedule_header(table: ScheduleTable):
    h, w = table.shape
    return ["t", "alpha", "sigma", "sigma_blur", "tau"] + [f"d_{m}_{n}" for m in range(h) for n in range(w)]
