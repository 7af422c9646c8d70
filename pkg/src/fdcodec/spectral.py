"""Orthonormal 2-D DCT and the squared-frequency grid.

Fields are ``(H, W)`` or ``(..., H, W, C)``; the transform acts on the two
spatial axes and leaves channels (and any leading batch axes) alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft

from ._validation import check_positive_int


@dataclass(frozen=True)
class DctPlan:
    height: int
    width: int

    def __post_init__(self):
        check_positive_int(self.height, "height")
        check_positive_int(self.width, "width")

    def axes(self, field):
        if field.ndim == 2:
            return (0, 1)
        if field.ndim < 2:
            raise ValueError(f"field must be at least 2-D, got shape {field.shape}")
        return (field.ndim - 3, field.ndim - 2)

    def check(self, field):
        field = np.asarray(field, dtype=np.float64)
        ax = self.axes(field)
        dims = (field.shape[ax[0]], field.shape[ax[1]])
        if dims != (self.height, self.width):
            raise ValueError(f"field spatial dims {dims} do not match plan {(self.height, self.width)}")
        return field, ax


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Nonnegative squared frequencies, ``lam[m, n] = pi^2 (n^2/W^2 + m^2/H^2)``."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64)
        if lam.ndim != 2 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lam must be a finite, nonnegative 2-D array")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def shape(self):
        return self.lam.shape


def dct2_forward(field, plan: DctPlan):
    """Frequency coefficients ``V^T x`` (type-II DCT, orthonormal, per axis)."""
    field, ax = plan.check(field)
    return fft.dctn(field, type=2, norm="ortho", axes=ax)


def dct2_inverse(coeffs, plan: DctPlan):
    """Pixel field ``V f`` (type-III DCT, the exact inverse of ``dct2_forward``)."""
    coeffs, ax = plan.check(coeffs)
    return fft.idctn(coeffs, type=2, norm="ortho", axes=ax)


def frequency_grid(width, height) -> FrequencyGrid:
    width = check_positive_int(width, "width")
    height = check_positive_int(height, "height")
    n = np.arange(width, dtype=np.float64)
    m = np.arange(height, dtype=np.float64)
    lam = np.pi**2 * ((n[None, :] / width) ** 2 + (m[:, None] / height) ** 2)
    return FrequencyGrid(lam)

