import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fdcodec._detmath import det_linear
from fdcodec.eval.bench import bench_entropy_latency
from fdcodec.eval.context import (
    SourceConfig,
    ar1_cholesky,
    coded_bits,
    conditional_variances,
    context_benefit,
    entropy_lower_bound,
    min_discrete_entropy,
    sample_latents,
    source_entropy_iid,
)
from fdcodec.eval.metrics import PSNR_CAP, RatePoint, bd_rate, psnr
from fdcodec.entropy import EntropyConfig, EntropyModel, init_entropy_weights
from fdcodec.entropy.fit import ContextEntropyModel


# ----------------------------------------------------------------------------- PSNR


def test_psnr_cap_and_closed_forms():
    x = np.full((4, 4, 3), 100.0)
    assert psnr(x, x) == PSNR_CAP
    # constant error of 1 on 8-bit peak
    assert psnr(x, x + 1) == pytest.approx(20 * math.log10(255), abs=1e-12)
    assert psnr(x, x + 1) == pytest.approx(48.1308, abs=1e-4)
    assert psnr(np.zeros(10), np.full(10, 255.0)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_permutation_invariant_and_monotone(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 255, 50)
    e = rng.normal(0, 5, 50)
    perm = rng.permutation(50)
    assert psnr(x, x + e) == pytest.approx(psnr(x[perm], (x + e)[perm]), rel=1e-12)
    assert psnr(x, x + 2 * e) < psnr(x, x + e)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(0), np.zeros(0))


# ----------------------------------------------------------------------------- BD-rate

Q = np.array([30.0, 33.0, 36.0, 39.0])
R = np.array([0.12, 0.25, 0.5, 1.1])


def test_bd_rate_identity_and_doubling():
    a = np.column_stack([R, Q])
    assert bd_rate(a, a) == pytest.approx(0.0, abs=1e-9)
    assert bd_rate(a, np.column_stack([2 * R, Q])) == pytest.approx(100.0, abs=1e-6)
    assert bd_rate(a, [RatePoint(r, q) for r, q in zip(R / 2, Q)]) == pytest.approx(-50.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bd_rate_antisymmetry_and_oracle(seed):
    rng = np.random.default_rng(seed)
    qa = np.sort(rng.uniform(28, 42, 5))
    qb = np.sort(rng.uniform(28, 42, 5))
    if min(qa.max(), qb.max()) - max(qa.min(), qb.min()) < 2 or min(np.diff(qa).min(), np.diff(qb).min()) < 0.3:
        return
    ra = np.exp(0.2 * qa - 7 + rng.normal(0, 0.05, 5))
    rb = np.exp(0.2 * qb - 7 + rng.normal(0, 0.05, 5) + rng.uniform(-0.3, 0.3))
    a, b = np.column_stack([ra, qa]), np.column_stack([rb, qb])
    ab, ba = bd_rate(a, b), bd_rate(b, a)
    assert (1 + ab / 100) * (1 + ba / 100) == pytest.approx(1.0, abs=1e-9)
    assert ab == pytest.approx(oracles.bd_rate_trapezoid(ra, qa, rb, qb), abs=0.1)


def test_bd_rate_errors():
    a = np.column_stack([R, Q])
    with pytest.raises(ValueError):
        bd_rate(a[:3], a)
    with pytest.raises(ValueError):
        bd_rate(a, np.column_stack([R, Q + 20]))
    with pytest.raises(ValueError):
        bd_rate(np.column_stack([R, [30, 30, 31, 32]]), a)
    with pytest.raises(ValueError):
        RatePoint(0.0, 30.0)
    with pytest.raises(ValueError):
        RatePoint(0.1, float("nan"))


# ----------------------------------------------------------------------------- synthetic source


@pytest.mark.parametrize("n,rho", [(1, 0.5), (5, 0.0), (7, 0.9), (12, 0.8)])
def test_ar1_cholesky_closed_form(n, rho):
    i = np.arange(n)
    K = rho ** np.abs(i[:, None] - i[None])
    np.testing.assert_allclose(ar1_cholesky(n, rho), np.linalg.cholesky(K), atol=1e-12)


def test_conditional_variances_match_dense_cholesky():
    cfg = SourceConfig(rho_s=0.7, rho_c=0.4, M=3, h=3, w=4, scale=2.0)
    ax = lambda n, r: r ** np.abs(np.arange(n)[:, None] - np.arange(n)[None])
    K = cfg.scale**2 * np.kron(np.kron(ax(cfg.M, cfg.rho_c), ax(cfg.h, cfg.rho_s)), ax(cfg.w, cfg.rho_s))
    d = np.diag(np.linalg.cholesky(K)) ** 2
    np.testing.assert_allclose(conditional_variances(cfg).reshape(-1), d, rtol=1e-10)


def test_sample_covariance_matches_model():
    cfg = SourceConfig(rho_s=0.6, rho_c=0.5, M=3, h=4, w=4, scale=20.0)
    y = sample_latents(cfg, 4000, seed=1)
    assert y.shape == (4000, 4, 4, 3) and np.all(y == np.rint(y))
    # rounding adds 1/12 variance; AR(1) lags along each axis
    var = y.var()
    assert var == pytest.approx(400 + 1 / 12, rel=0.03)
    assert np.mean(y[:, :, :-1] * y[:, :, 1:]) / var == pytest.approx(0.6, abs=0.03)
    assert np.mean(y[..., :-1] * y[..., 1:]) / var == pytest.approx(0.5, abs=0.03)


def test_min_discrete_entropy_limits():
    assert min_discrete_entropy(0.04) < 1e-6
    s = 20.0
    assert min_discrete_entropy(s) == pytest.approx(0.5 * math.log2(2 * math.pi * math.e * s * s), abs=1e-3)
    assert min_discrete_entropy(1.0) < min_discrete_entropy(2.0)


def test_bound_equals_iid_entropy_without_correlation():
    cfg = SourceConfig(rho_s=0.0, rho_c=0.0)
    assert entropy_lower_bound(cfg) == pytest.approx(source_entropy_iid(cfg), abs=1e-9)
    assert entropy_lower_bound(SourceConfig()) < source_entropy_iid(SourceConfig())


@pytest.mark.slow
def test_iid_source_gains_nothing_and_coder_is_tight():
    cfg = SourceConfig(rho_s=0.0, rho_c=0.0)
    rows = context_benefit(cfg, variants=("factorized", "hyper", "channel"))
    h = source_entropy_iid(cfg)
    for r in rows:
        assert r["bps"] >= r["bound_bps"] - 1e-12
        assert abs(r["bps"] - h) / h < 0.02
        for c, i in zip(r["coded_bits"], r["ideal_bits"]):
            assert c <= i + 64


def test_coded_bits_tracks_cross_entropy():
    cfg = SourceConfig(M=12, h=8, w=8)
    lat = sample_latents(cfg, 6, 0)
    est = ContextEntropyModel(M=12, N=2, contexts=("hyper", "channel"), hyper_gains=(1.0,)).fit(lat[:4])
    coded, ideal = coded_bits(est.model_, lat[4:])
    # per latent: the hyper latent plus 5 chunks x 2 phases
    assert len(coded) == 2 * 11
    assert all(c <= i + 64 for c, i in zip(coded, ideal))
    assert est.score(lat[4:]) < 0


# ----------------------------------------------------------------------------- sparse det_linear


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 40), st.integers(1, 40), st.floats(0.0, 0.3))
def test_sparse_det_linear_matches_left_to_right(seed, n, k, m, density):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    w = rng.normal(size=(k, m)) * (rng.uniform(size=(k, m)) < density)
    out = det_linear(x, w)
    ref = np.zeros((n, m))
    for r in range(n):
        for c in range(m):
            acc = x[r, 0] * w[0, c]
            for i in range(1, k):
                acc = acc + x[r, i] * w[i, c]
            ref[r, c] = acc
    assert np.array_equal(out, ref)


def test_det_linear_all_zero_weights():
    assert np.array_equal(det_linear(np.ones((3, 30)), np.zeros((30, 20))), np.zeros((3, 20)))


# ----------------------------------------------------------------------------- latency bench


def test_bench_reports_identity_and_sequential_is_slower():
    cfg = EntropyConfig(M=24, C_z=4, N=2)
    m = EntropyModel(cfg, init_entropy_weights(cfg, 0, hyper_features=6, ctx_width=5, local_width=4, attn_dim=3, head_width=8))
    r = bench_entropy_latency(m, latent_dims=(16, 16), threads=(1, 2), runs=5, sequential_runs=1)
    assert r["identical"] and r["sequential_ms"] > r["parallel_ms"][1]
    with pytest.raises(ValueError):
        bench_entropy_latency(m, latent_dims=(4, 4), runs=0)


@pytest.mark.slow
def test_bench_latency_roughly_doubles_with_area():
    cfg = EntropyConfig(M=48, C_z=4, N=4)
    m = EntropyModel(cfg, init_entropy_weights(cfg, 0))
    small = bench_entropy_latency(m, latent_dims=(24, 32), threads=(1,), runs=7, sequential_runs=0)
    big = bench_entropy_latency(m, latent_dims=(48, 32), threads=(1,), runs=7, sequential_runs=0)
    assert big["sequential_ms"] is None and big["identical"]
    assert 1.5 <= big["parallel_ms"][1] / small["parallel_ms"][1] <= 3.0
