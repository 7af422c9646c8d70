import numpy as np
import pytest

from fdcodec.diffusion import (
    ancestral_step,
    decode_image,
    forward_sample,
    oracle_denoiser,
    predict_x,
    simplified_loss,
)
from fdcodec.schedules import ScheduleConfig, build_schedule, posterior_params
from fdcodec.spectral import DctPlan, dct2_forward, frequency_grid
from oracles import dct_matrix


def table(T=4, sbm=3.0, hw=(8, 8), dmin=0.001):
    return build_schedule(ScheduleConfig(T, sbm, dmin), frequency_grid(hw[1], hw[0]))


def dense_blur(tb, t):
    """Explicit (HW x HW) operator V diag(alpha_vec) V^T on row-major fields."""
    h, w = tb.shape
    V = np.kron(dct_matrix(h), dct_matrix(w)).T
    return V @ np.diag(tb.alpha_vec(t).ravel()) @ V.T


def test_forward_t0_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, (8, 8, 3))
    z, _ = forward_sample(x, 0, table(), 123)
    np.testing.assert_allclose(z, x, atol=1e-14)


def test_forward_matches_dense_oracle():
    tb = table(T=4)
    x = np.random.default_rng(1).normal(size=(8, 8))
    z, eps = forward_sample(x, 2, tb, 77)
    ref = (dense_blur(tb, 2) @ x.ravel()).reshape(8, 8) + tb.sigma[2] * eps
    np.testing.assert_allclose(z, ref, atol=1e-10)


def test_forward_endpoint_statistics():
    tb = table(T=10, hw=(4, 4))
    x = np.full((2000, 4, 4, 1), 0.8)
    z, _ = forward_sample(x, 10, tb, 5)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.03


def test_energy_identity_monte_carlo():
    tb = table(T=10, hw=(4, 4))
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (4, 4, 2))
    t = 6
    plan = DctPlan(4, 4)
    mean_energy = np.sum((tb.alpha_vec(t)[:, :, None] * dct2_forward(x, plan)) ** 2)
    expected = mean_energy + tb.sigma[t] ** 2 * x.size
    z, _ = forward_sample(np.broadcast_to(x, (20000, 4, 4, 2)).copy(), t, tb, 11)
    energy = np.sum(z**2, axis=(1, 2, 3))
    se = energy.std() / np.sqrt(len(energy))
    assert abs(energy.mean() - expected) < 3 * se


def test_seed_determinism():
    x = np.random.default_rng(2).normal(size=(8, 8, 1))
    a = forward_sample(x, 3, table(), 42)[0]
    b = forward_sample(x, 3, table(), 42)[0]
    assert np.array_equal(a, b)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_predict_x_inverts_forward(t):
    tb = table(T=4)
    x = np.random.default_rng(t).normal(size=(8, 8, 2))
    z, eps = forward_sample(x, t, tb, t)
    np.testing.assert_allclose(predict_x(z, t, eps, tb), x, atol=1e-8)


def test_predict_x_zero_eps_and_dense_oracle():
    tb = table(T=4)
    rng = np.random.default_rng(4)
    z, eh = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    h = 8
    V = np.kron(dct_matrix(h), dct_matrix(h)).T
    inv = V @ np.diag(1.0 / tb.alpha_vec(2).ravel()) @ V.T
    np.testing.assert_allclose(predict_x(z, 2, np.zeros_like(z), tb), (inv @ z.ravel()).reshape(8, 8), atol=1e-10)
    ref = (inv @ (z.ravel() - tb.sigma[2] * eh.ravel())).reshape(8, 8)
    np.testing.assert_allclose(predict_x(z, 2, eh, tb), ref, atol=1e-10)


def test_ancestral_mean_matches_posterior_composition():
    tb = table(T=6, sbm=4.0)
    plan = DctPlan(8, 8)
    rng = np.random.default_rng(6)
    for t in range(1, 6):
        z, eh = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        f_t, f_e = dct2_forward(z, plan), dct2_forward(eh, plan)
        mu_ft, mu_fx, sp = posterior_params(tb, t)
        fx_hat = (f_t - tb.sigma[t] * f_e) / tb.alpha_vec(t)
        composed = mu_ft * f_t + mu_fx * fx_hat
        printed_coef = tb.sigma2_step(t) / (tb.alpha_step(t) * tb.sigma[t] ** 2)
        printed = mu_ft * f_t + printed_coef * (f_t - tb.sigma[t] * f_e)
        np.testing.assert_allclose(printed, composed, atol=1e-12 * (1 + np.abs(composed).max()))
        step = ancestral_step(z, t, eh, tb, noise_mode="paper-literal")
        expected = composed + sp * f_e
        np.testing.assert_allclose(dct2_forward(step, plan), expected, atol=1e-11)


def test_noise_modes_agree_where_step_is_deterministic():
    # t=1 has sigma_0 = 0 so the posterior sd vanishes everywhere
    tb = table(T=4)
    rng = np.random.default_rng(8)
    z, eh = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    a = ancestral_step(z, 1, eh, tb, rng_seed=1, noise_mode="fresh-noise")
    b = ancestral_step(z, 1, eh, tb, noise_mode="paper-literal")
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_ancestral_rejects_bad_args():
    tb = table()
    z = np.zeros((8, 8))
    with pytest.raises(ValueError):
        ancestral_step(z, 0, z, tb, 1)
    with pytest.raises(ValueError):
        ancestral_step(z, 1, z, tb, 1, noise_mode="ddim")


def test_decode_T1_equals_single_reparameterised_step():
    # With T=1, z_0 is exactly the reparameterised estimate from z_1.
    tb = table(T=1, hw=(4, 4))
    calls = []

    def den(z, t, y):
        calls.append(z.copy())
        return 0.3 * z

    out = decode_image(None, den, tb, 3, shape=(4, 4, 1))
    np.testing.assert_allclose(out, predict_x(calls[0], 1, 0.3 * calls[0], tb), atol=1e-12)


def test_decode_determinism():
    tb = table(T=5, hw=(4, 4))
    den = oracle_denoiser(np.ones((4, 4)), tb)
    a = decode_image(None, den, tb, 99, shape=(4, 4, 2))
    b = decode_image(None, den, tb, 99, shape=(4, 4, 2))
    assert np.array_equal(a, b)


def test_decode_rejects_bad_denoiser():
    tb = table(T=2, hw=(4, 4))
    with pytest.raises(ValueError):
        decode_image(None, lambda z, t, y: z[:2], tb, 0, shape=(4, 4, 1))
    with pytest.raises(FloatingPointError):
        decode_image(None, lambda z, t, y: z * np.nan, tb, 0, shape=(4, 4, 1))


def test_simplified_loss():
    rng = np.random.default_rng(0)
    eps = rng.normal(size=(64, 64, 3))
    assert simplified_loss(None, 1, eps, eps) == 0.0
    n = eps.size
    assert abs(simplified_loss(None, 1, eps, np.zeros_like(eps)) - 1.0) < 3 * np.sqrt(2.0 / n) * 3
    eh = rng.normal(size=eps.shape)
    plan = DctPlan(64, 64)
    freq = np.mean(dct2_forward(eps - eh, plan) ** 2)
    assert abs(simplified_loss(None, 1, eps, eh) - freq) < 1e-10


def test_oracle_limits():
    tb = table(T=10, hw=(1, 8))
    z = np.random.default_rng(1).normal(size=(1, 8))
    big = oracle_denoiser(np.full((1, 8), 1e24), tb)(z, 5)
    assert np.abs(big).max() < 1e-10
    tiny = oracle_denoiser(np.full((1, 8), 1e-14), tb)(z, 5)
    np.testing.assert_allclose(tiny, z / tb.sigma[5], atol=1e-10)
    with pytest.raises(ValueError):
        oracle_denoiser(np.zeros((1, 8)), tb)


def test_oracle_beats_naive_predictors():
    tb = table(T=20, hw=(1, 16), sbm=2.0)
    plan = DctPlan(1, 16)
    v = 1.0 / (1.0 + np.arange(16.0))[None, :]
    rng = np.random.default_rng(3)
    from fdcodec.spectral import dct2_inverse

    x = dct2_inverse(rng.normal(size=(20000, 1, 16, 1)) * np.sqrt(v)[:, :, None], plan)
    den = oracle_denoiser(v, tb)
    for t in (3, 10, 17):
        z, eps = forward_sample(x, t, tb, t)
        oracle = np.mean((den(z, t) - eps) ** 2)
        assert oracle <= np.mean(eps**2)
        assert oracle <= np.mean((z - eps) ** 2)
