"""Bit-reproducible elementwise math and fixed-order reductions.

Everything on the entropy-parameter path is built from IEEE-754 basic
operations (``+ - * /``, ``floor``, ``ldexp``), which numpy rounds correctly
per element regardless of array size, memory layout or SIMD dispatch.
Transcendentals from libm / numpy's SIMD kernels are avoided because their
last-ulp results can differ between platforms and even between the scalar
and vector code paths of one build.

Reductions are accumulated strictly left-to-right so a row's result does not
depend on how many other rows are computed alongside it.  That is what makes
the one-shot checkerboard pass and a position-by-position pass agree bit for
bit, and what keeps encoder and decoder in lockstep.
"""

from __future__ import annotations

import numpy as np

_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.44269504088896338700e00

# Taylor coefficients 1/k! for k = 13..0, evaluated by Horner on |r| <= ln2/2.
_EXP_COEFFS = tuple(1.0 / float(np.prod(np.arange(1, k + 1))) for k in range(13, -1, -1))

# Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7.
_AS_P = 0.3275911
_AS_A = (1.061405429, -1.453152027, 1.421413741, -0.284496736, 0.254829592)

_ROW_CUTOFF = 64
_SPARSE_DENSITY = 0.25


def det_exp(x):
    """exp(x) using Cody-Waite range reduction and a degree-13 polynomial."""
    x = np.asarray(x, dtype=np.float64)
    xc = np.clip(x, -745.5, 709.7)
    k = np.rint(xc * _INV_LN2)
    r = (xc - k * _LN2_HI) - k * _LN2_LO
    p = np.full_like(r, _EXP_COEFFS[0])
    for c in _EXP_COEFFS[1:]:
        p = p * r + c
    out = np.ldexp(p, k.astype(np.int64))
    out = np.where(x < -745.0, 0.0, out)
    out = np.where(x > 709.7, np.inf, out)
    return out


def det_log(x):
    """Natural log for positive finite x via frexp and an atanh series."""
    x = np.asarray(x, dtype=np.float64)
    m, e = np.frexp(x)
    # m in [0.5, 1); move to [sqrt(.5), sqrt(2)) for a faster series
    small = m < 0.7071067811865476
    m = np.where(small, m * 2.0, m)
    e = np.where(small, e - 1, e).astype(np.float64)
    s = (m - 1.0) / (m + 1.0)
    s2 = s * s
    acc = np.full_like(s, 1.0 / 23.0)
    for k in range(21, 0, -2):
        acc = acc * s2 + 1.0 / k
    return 2.0 * s * acc + e * _LN2_HI + e * _LN2_LO


def det_log1p(u):
    """log(1 + u) for u >= 0, compensated for the rounding of 1 + u."""
    u = np.asarray(u, dtype=np.float64)
    y = 1.0 + u
    d = y - 1.0
    safe = np.where(d == 0.0, 1.0, d)
    return np.where(d == 0.0, u, det_log(y) * (u / safe))


def det_softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + det_log1p(det_exp(-np.abs(x)))


def det_erfc_abs(x):
    """erfc(|x|), evaluated directly so tails keep relative precision."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    t = 1.0 / (1.0 + _AS_P * a)
    poly = np.full_like(t, _AS_A[0])
    for c in _AS_A[1:]:
        poly = poly * t + c
    return poly * t * det_exp(-a * a)


def det_erf(x):
    """Odd-symmetric erf: erf(-x) == -erf(x) exactly."""
    x = np.asarray(x, dtype=np.float64)
    y = 1.0 - det_erfc_abs(x)
    return np.where(x < 0, -y, y)


def seqsum(a, axis=-1):
    """Left-to-right sum along ``axis`` (``np.sum`` is pairwise)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] == 0:
        return np.zeros(np.delete(a.shape, axis), dtype=np.float64)
    return np.take(np.cumsum(a, axis=axis), -1, axis=axis)


def det_linear(x, weight, bias=None):
    """Row-wise ``x @ weight + bias`` with a fixed accumulation order.

    ``x`` is (n, k), ``weight`` is (k, m).  Each output element is
    ``((x0*w0 + x1*w1) + x2*w2) + ...`` followed by the bias, whatever ``n``.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, k = x.shape
    m = weight.shape[1]
    nz = weight != 0.0
    if k == 0:
        out = np.zeros((n, m))
    elif k * m > 256 and nz.mean() <= _SPARSE_DENSITY:
        # same left-to-right order; exact-zero weights are skipped (x must be finite)
        out = np.zeros((n, m))
        rows, cols = np.nonzero(nz)
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]]) if rows.size else rows
        for a, b in zip(starts, np.r_[starts[1:], rows.size]):
            i, cs = rows[a], cols[a:b]
            out[:, cs] = out[:, cs] + x[:, i : i + 1] * weight[i, cs]
    elif n <= _ROW_CUTOFF:
        out = seqsum(x[:, :, None] * weight[None, :, :], axis=1)
    else:
        out = x[:, 0:1] * weight[0]
        for i in range(1, k):
            out = out + x[:, i : i + 1] * weight[i]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out
