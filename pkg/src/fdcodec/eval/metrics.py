"""PSNR and Bjontegaard-delta rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0


@dataclass(frozen=True)
class RatePoint:
    bpp: float
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and math.isfinite(self.quality)):
            raise ValueError("rate points must be finite")
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")


def psnr(x, x_hat, peak=255.0):
    """``10 log10(peak^2 / MSE)``, capped at 99 dB (identical inputs give the cap)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.size == 0:
        raise ValueError("empty input")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _curve(c):
    if isinstance(c, (list, tuple)) and c and isinstance(c[0], RatePoint):
        arr = np.array([[p.bpp, p.quality] for p in c], dtype=np.float64)
    else:
        arr = np.asarray(c, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("a curve is an (n, 2) array of (bpp, psnr)")
    if arr.shape[0] < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    for r, q in arr:
        RatePoint(float(r), float(q))
    if len(np.unique(arr[:, 1])) != arr.shape[0]:
        raise ValueError("quality values within a curve must be distinct")
    return arr[:, 0], arr[:, 1]


def bd_rate(curve_a, curve_b):
    """Average rate change of ``b`` relative to ``a`` at equal quality, in percent.

    Log-rate is fitted as a cubic in PSNR for each curve; the fits are
    integrated exactly over the shared PSNR interval.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo = max(qa.min(), qb.min())
    hi = min(qa.max(), qb.max())
    if not hi > lo:
        raise ValueError("curves have no overlapping quality range")
    pa = np.polyint(np.polyfit(qa, np.log(ra), 3))
    pb = np.polyint(np.polyfit(qb, np.log(rb), 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    return (math.exp((ib - ia) / (hi - lo)) - 1.0) * 100.0
