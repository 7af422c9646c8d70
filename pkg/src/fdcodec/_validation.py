"""Input checks shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np


def check_field(x, name="field", ndim=None, finite=True):
    """Return ``x`` as a float64 array, rejecting bad shapes and non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise ValueError(f"{name} must have ndim in {ndim}, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image(x, name="image"):
    """Coerce to an (H, W, C) float field; 2-D input gains a channel axis."""
    arr = check_field(x, name, ndim=(2, 3))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def check_latent(y, name="latent"):
    arr = check_field(y, name, ndim=3)
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def check_timestep(t, T, lo=0):
    if not isinstance(t, numbers.Integral) or isinstance(t, bool):
        raise TypeError(f"timestep must be an integer, got {type(t).__name__}")
    if not lo <= t <= T:
        raise ValueError(f"timestep {t} outside [{lo}, {T}]")
    return int(t)


def check_positive_int(v, name):
    if not isinstance(v, numbers.Integral) or isinstance(v, bool) or v < 1:
        raise ValueError(f"{name} must be a positive integer, got {v!r}")
    return int(v)


def make_rng(seed):
    """Counter-based Philox generator; the only RNG used on reproducible paths."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))
