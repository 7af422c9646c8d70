"""Acceptance criteria 1-13.  Each test prints one PASS/FAIL line."""

import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest
from scipy import fft

import oracles
from fdcodec.codec import CodecConfig, analyze, decode_latent, encode, init_codec_weights, quantize, save_weights
from fdcodec.codec.pipeline import clamp_latent, encode_latent
from fdcodec.coder import PmfTable, TOTAL, cross_entropy_bits, decode_symbols, discretize_gaussian, encode_symbols
from fdcodec.denoiser import ToyTrainConfig, gaussian_blobs, init_params, loss_and_grad, train_toy
from fdcodec.diffusion import ancestral_step, decode_image, forward_sample, oracle_denoiser
from fdcodec.entropy import PHASES, EntropyConfig, EntropyModel, checkerboard_masks, init_entropy_weights, laplacian_pe_table
from fdcodec.eval.bench import bench_entropy_latency, random_latent
from fdcodec.eval.context import SourceConfig, context_benefit
from fdcodec.eval.metrics import bd_rate
from fdcodec.schedules import FrequencyGrid, ScheduleConfig, build_schedule, posterior_params
from fdcodec.spectral import frequency_grid

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:>3}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


# ----------------------------------------------------------------------------- 1


def test_c01_ddpm_reduction(report):
    T = 50
    with Clock() as clk:
        tb = build_schedule(ScheduleConfig(T, 0.0, 0.001), frequency_grid(8, 8))
        ref = oracles.IsotropicDDPM(T)
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (8, 8, 1))
        err_marg = err_post = err_step = err_last = 0.0
        for t in range(1, T + 1):
            z, eps = forward_sample(x, t, tb, 100 + t)
            err_marg = max(err_marg, np.abs(z - ref.marginal(x, t, eps)).max())
            c_ft, c_fx, sd = ref.posterior(t)
            mu_ft, mu_fx, sp = posterior_params(tb, t)
            err_post = max(err_post, np.abs(mu_ft - c_ft).max(), np.abs(mu_fx - c_fx).max(), np.abs(sp - sd).max())
            eps_hat = rng.normal(size=z.shape)
            got = ancestral_step(z, t, eps_hat, tb, rng_seed=500 + t)
            want = ref.step(z, t, eps_hat, np.random.Generator(np.random.Philox(500 + t)).standard_normal(z.shape))
            if t < T:
                err_step = max(err_step, np.abs(got - want).max())
            else:
                # x_hat = (z - sigma eps_hat) / alpha_T divides by the 1e-9 floor; compare relative to scale
                err_last = np.abs(got - want).max() / np.abs(want).max()
    ok = max(err_marg, err_post, err_step, err_last) < 1e-12 and clk.s < 5
    report(1, ok, f"marginal {err_marg:.1e} posterior {err_post:.1e} step(t<T) {err_step:.1e} step(t=T, rel) {err_last:.1e}; {clk.s:.2f}s")
    assert ok


# ----------------------------------------------------------------------------- 2


def test_c02_schedule_identities(report):
    with Clock() as clk:
        tb = build_schedule(ScheduleConfig(500, 25.0, 0.001), frequency_grid(16, 16))
        vp = np.abs(tb.alpha**2 + tb.sigma**2 - 1).max()
        dc = max(abs(tb.d(t)[0, 0] - 1.0) for t in range(501))
        mono = all(np.all(tb.alpha_vec(t) <= tb.alpha_vec(t - 1)) for t in range(1, 501))
        s2min = min(tb.sigma2_step(t).min() for t in range(1, 501))
    ok = vp < 1e-12 and dc < 1e-12 and mono and s2min >= 0 and clk.s < 1
    report(2, ok, f"|a^2+s^2-1| {vp:.1e}, |d_DC-1| {dc:.1e}, monotone {mono}, min s2_step {s2min:.2e}; {clk.s:.2f}s")
    assert ok


# ----------------------------------------------------------------------------- 3


def test_c03_posterior_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    with Clock() as clk:
        for _ in range(100):
            T = int(rng.integers(2, 501))
            t = int(rng.integers(1, T + 1))
            lam = rng.uniform(0, 2 * np.pi**2, (1, 4))
            tb = build_schedule(ScheduleConfig(T, float(rng.uniform(0, 30)), 0.001), FrequencyGrid(lam))
            got = posterior_params(tb, t)
            a_prev, a_t = tb.alpha_vec(t - 1), tb.alpha_vec(t)
            a_step, s_step = tb.alpha_step(t), np.sqrt(tb.sigma2_step(t))
            for k in range(lam.size):
                want = oracles.gaussian_conditioning(
                    a_prev[0, k], tb.sigma[t - 1], a_step[0, k], s_step[0, k], a_t[0, k]
                )
                worst = max(worst, *(abs(g[0, k] - w) for g, w in zip(got, want)))
    ok = worst < 1e-10 and clk.s < 5
    report(3, ok, f"max |posterior - 2x2 conditioning| {worst:.1e} over 100 configs x 4 frequencies; {clk.s:.2f}s")
    assert ok


# ----------------------------------------------------------------------------- 4

N4 = 10**5
SPEC4 = 1.0 / (1.0 + np.arange(16.0)) ** 1.5


def _c4_table():
    return build_schedule(ScheduleConfig(50, 25.0, 0.001), frequency_grid(16, 1))


def _c4_analytic(tb, v):
    """Exact variance of each DCT coefficient after the sampler with the Bayes predictor."""
    var = np.ones_like(v)
    for t in range(tb.T, 0, -1):
        a, s = tb.alpha_vec(t)[0], tb.sigma[t]
        mu_ft, mu_fx, sp = (p[0] for p in posterior_params(tb, t))
        c = mu_ft + mu_fx / tb.alpha_vec_safe(t)[0] * (a * a * v / (a * a * v + s * s))
        var = c * c * var + sp * sp
    return var


@pytest.fixture(scope="module")
def c4_samples():
    tb = _c4_table()
    den = oracle_denoiser(SPEC4[None, :], tb)
    with Clock() as clk:
        z = decode_image(None, den, tb, rng_seed=4, shape=(N4, 1, 16, 1))
    f = fft.dct(z[:, 0, :, 0], type=2, norm="ortho", axis=1)
    return np.var(f, axis=0), clk.s


def test_c04_oracle_sampler_reproduces_spectrum(report, c4_samples):
    emp, secs = c4_samples
    ratio = emp / SPEC4
    worst = np.abs(ratio - 1).max()
    ok = worst <= 0.05 and secs < 120
    report(4, ok, f"sampled/source variance per frequency in [{ratio.min():.3f}, {ratio.max():.3f}] (need within 5%); {secs:.1f}s")
    assert ok


def test_c04_sampler_matches_exact_variance_propagation(report, c4_samples):
    emp, _ = c4_samples
    exact = _c4_analytic(_c4_table(), SPEC4)
    worst = np.abs(emp / exact - 1).max()
    # variance estimate from 1e5 Gaussian draws has relative SE sqrt(2/1e5) = 0.45%
    ok = worst < 0.025
    report("4b", ok, f"Monte-Carlo vs exact propagated variance max rel. dev. {worst:.4f}; exact ratio to source {np.min(exact / SPEC4):.3f}..{np.max(exact / SPEC4):.3f}")
    assert ok


# ----------------------------------------------------------------------------- 5


def test_c05_gradients(report):
    rng = np.random.default_rng(5)
    worst, kinks = 0.0, 0
    with Clock() as clk:
        for b in range(10):
            p = init_params(1, 1, 4, seed=b)
            p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
            z = rng.normal(size=(2, 16, 16, 1))
            y = rng.normal(size=(2, 1, 1, 1))
            eps = rng.normal(size=z.shape)
            t = rng.integers(1, 21, 2)
            _, grads = loss_and_grad(p, z, t, y, eps, 20)
            num, k = oracles.fd_gradients(p, z, t, y, eps, 20)
            kinks += k
            for name in p:
                rel = np.abs(grads[name] - num[name]) / np.maximum(np.maximum(np.abs(grads[name]), np.abs(num[name])), 1e-8)
                worst = max(worst, rel.max())
    ok = worst < 1e-4 and clk.s < 30
    report(5, ok, f"max rel. error {worst:.1e} over all parameters of an F=4 model, 10 batches ({kinks} kink re-probes); {clk.s:.1f}s")
    assert ok


# ----------------------------------------------------------------------------- 6


def _random_tables(rng, n_tables, rows, k):
    out = []
    for _ in range(n_tables):
        f = np.ones((rows, k), dtype=np.int64)
        for r in range(rows):
            w = rng.dirichlet(np.full(k, rng.choice([0.05, 1.0])))
            extra = np.floor(w * (TOTAL - k)).astype(np.int64)
            extra[np.argmax(w)] += TOTAL - k - extra.sum()
            f[r] += extra
        out.append(PmfTable(f, int(rng.integers(-10, 10))))
    return out


def test_c06_coder_lossless_and_tight(report):
    rng = np.random.default_rng(6)
    with Clock() as clk:
        tables = _random_tables(rng, 64, 8, 12) + [discretize_gaussian(rng.normal(0, 3, 8), rng.uniform(0.04, 20, 8))]
        fails = 0
        for _ in range(10**5):
            tab = tables[rng.integers(len(tables))]
            n = int(rng.integers(0, 9))
            idx = rng.integers(0, tab.n_rows, n)
            sym = np.array([rng.choice(tab.n_symbols, p=tab.freqs[i] / TOTAL) for i in idx], dtype=np.int64) + tab.offset
            fails += not np.array_equal(decode_symbols(encode_symbols(sym, tab, idx), tab, index=idx), sym)
        stats = []
        for kind in ("gaussian", "adversarial"):
            n = 10**6
            if kind == "gaussian":
                tab = discretize_gaussian(rng.normal(0, 5, 512), np.exp(rng.uniform(np.log(0.04), np.log(30), 512)))
            else:
                tab = _random_tables(rng, 1, 512, 40)[0]
            idx = rng.integers(0, tab.n_rows, n)
            cdf = np.cumsum(tab.freqs, axis=1)
            u = rng.integers(0, TOTAL, n)
            sym = (cdf[idx] <= u[:, None]).sum(axis=1) + tab.offset
            data = encode_symbols(sym, tab, idx)
            ce = cross_entropy_bits(sym, tab, idx)
            exact = np.array_equal(decode_symbols(data, tab, index=idx), sym)
            stats.append((kind, 8 * len(data), ce, exact))
    tight = all(bits <= 1.01 * ce + 64 and exact for _, bits, ce, exact in stats)
    ok = fails == 0 and tight and clk.s < 60
    detail = ", ".join(f"{k}: {b} bits vs CE {c:.0f} ({(b - c) / c * 100:+.3f}%)" for k, b, c, _ in stats)
    report(6, ok, f"{fails} failures in 1e5 round trips; {detail}; {clk.s:.1f}s")
    assert ok


# ----------------------------------------------------------------------------- 7

DECODER_SCRIPT = textwrap.dedent(
    """
    import sys
    from pathlib import Path
    import numpy as np
    from fdcodec.codec import decode_latent, load_weights
    d = Path(sys.argv[1])
    for f in sorted(d.glob("*.fdc")):
        y, _ = decode_latent(f.read_bytes(), load_weights(f.with_suffix(".fdcw")))
        np.save(f.with_suffix(".npy"), y)
    """
)

C7_CONFIGS = (
    CodecConfig(M=12, C_z=4, N=2, T=2),
    CodecConfig(M=24, C_z=4, N=4, T=2),
    CodecConfig(M=48, C_z=8, N=4, T=2),
    CodecConfig(M=192, C_z=8, N=4, T=2),
)


def test_c07_end_to_end_latent_lossless(report, tmp_path):
    rng = np.random.default_rng(7)
    refs = {}
    with Clock() as clk:
        for i in range(100):
            hw = (64, 64) if i < 80 else (256, 256)
            cfg = C7_CONFIGS[i % len(C7_CONFIGS)]
            w = init_codec_weights(cfg, 3, seed=1000 + i, analysis_width=8, denoiser_features=4)
            x = rng.uniform(-1, 1, hw + (3,))
            data, _ = encode(x, w, cfg)
            refs[i] = clamp_latent(quantize(analyze(x, w)))[0]
            (tmp_path / f"{i:03d}.fdc").write_bytes(data)
            save_weights(tmp_path / f"{i:03d}.fdcw", w)
        proc = subprocess.run([sys.executable, "-c", DECODER_SCRIPT, str(tmp_path)], capture_output=True, text=True)
        same = [np.array_equal(np.load(tmp_path / f"{i:03d}.npy"), refs[i]) for i in range(100)] if proc.returncode == 0 else []
    ok = proc.returncode == 0 and len(same) == 100 and all(same) and clk.s < 120
    report(7, ok, f"{sum(same)}/100 latents identical after decoding in a separate process (80 at 64x64, 20 at 256x256); {clk.s:.1f}s {proc.stderr[-200:]}")
    assert ok


# ----------------------------------------------------------------------------- 8


def test_c08_no_leakage_from_undecoded_positions(report):
    cfg = EntropyConfig()
    m = EntropyModel(cfg, init_entropy_weights(cfg, seed=8))
    rng = np.random.default_rng(8)
    y = random_latent(8, 8, cfg.M, seed=8)
    hf = m.hyper_roundtrip(y)[1]
    part = checkerboard_masks(8, 8)
    lay = cfg.layout
    checked, bad = 0, []
    with Clock() as clk:
        for j in range(lay.n_chunks):
            for ph in PHASES:
                ref = m.chunk_params(y, hf, j, ph)
                for poison in (np.nan, 1e6):
                    p = y.copy()
                    end = lay.offsets[j] + lay.sizes[j]
                    p[:, :, end:] = poison if np.isnan(poison) else rng.normal(0, poison, p[:, :, end:].shape)
                    cur = p[:, :, lay.slice(j)]
                    if ph == "anchor":
                        cur[...] = poison
                    else:
                        cur[part.non_anchor] = poison
                    got = m.chunk_params(p, hf, j, ph)
                    checked += 1
                    if not (np.array_equal(ref[0], got[0]) and np.array_equal(ref[1], got[1])):
                        bad.append((j, ph, poison))
    ok = not bad and checked == 20 and clk.s < 30
    report(8, ok, f"{checked} poisoned (chunk, phase) evaluations, {len(bad)} differ; {clk.s:.1f}s")
    assert ok


# ----------------------------------------------------------------------------- 9


def test_c09_parallel_equals_sequential(report):
    with Clock() as clk:
        res = bench_entropy_latency(latent_dims=(48, 32), threads=(1, 4), runs=20, sequential_runs=3)
        cfg = EntropyConfig()
        m = EntropyModel(cfg, init_entropy_weights(cfg, seed=0))
        y = random_latent(24, 16, cfg.M, seed=9)
        streams = [encode_latent(y, m, threads=t) for t in (1, 4)]
    same_bytes = streams[0] == streams[1]
    faster = res["parallel_ms"][4] < res["sequential_ms"]
    ok = res["identical"] and same_bytes and faster and clk.s < 120
    report(
        9,
        ok,
        f"params identical {res['identical']}, bitstreams identical {same_bytes}; median ms: "
        f"parallel 1 thread {res['parallel_ms'][1]:.0f}, 4 threads {res['parallel_ms'][4]:.0f}, sequential {res['sequential_ms']:.0f}; {clk.s:.1f}s",
    )
    assert ok


# ----------------------------------------------------------------------------- 10


def test_c10_context_benefit(report):
    with Clock() as clk:
        rows = context_benefit(SourceConfig(rho_s=0.9, rho_c=0.8))
    bps = [r["bps"] for r in rows]
    steps = [(a - b) / a for a, b in zip(bps, bps[1:])]
    bound = rows[0]["bound_bps"]
    ok = all(s >= 0.01 for s in steps) and min(bps) >= bound and clk.s < 300
    seq = " > ".join(f"{r['variant']} {r['bps']:.4f}" for r in rows)
    report(10, ok, f"bits/symbol {seq}; steps {', '.join(f'{100 * s:.2f}%' for s in steps)}; bound {bound:.4f}; {clk.s:.1f}s")
    assert ok


# ----------------------------------------------------------------------------- 11


def test_c11_laplacian_pe(report):
    with Clock() as clk:
        errs = []
        for A, s, N in ((1.0, 1.0, 4), (0.7, 2.5, 4), (2.0, 0.3, 3), (1.3, 1.0, 2)):
            P = laplacian_pe_table(A, s, N)
            yy, xx = np.divmod(np.arange(N * N), N)
            dist = np.abs(yy[:, None] - yy[None]) + np.abs(xx[:, None] - xx[None])
            sym = np.array_equal(P, P.T)
            diag = np.allclose(np.diag(P), A * A, rtol=0, atol=1e-15)
            closer = dist[:, :, None, None] < dist[None, None]
            decay = bool(np.all(P[:, :, None, None] > P[None, None], where=closer))
            same = all(np.ptp(P[dist == d]) < 1e-15 for d in range(dist.max() + 1))
            errs.append(sym and diag and decay and same)
        flat = laplacian_pe_table(1.5, 1e6, 4)
        flat_ok = np.ptp(flat) < 1e-9 and abs(flat[0, 0] - 2.25) < 1e-12
        unit = abs(laplacian_pe_table(1.0, 1.0, 2)[0, 1] - np.exp(-0.5))
    ok = all(errs) and flat_ok and unit < 1e-12 and clk.s < 1
    report(11, ok, f"symmetry/diagonal/decay {all(errs)}, flat limit {flat_ok}, |P(unit offset) - e^-1/2| {unit:.1e}; {clk.s:.3f}s")
    assert ok


# ----------------------------------------------------------------------------- 12


def test_c12_bd_rate(report):
    q = np.array([30.0, 32.5, 35.0, 37.5, 40.0])
    ra = np.array([0.1, 0.18, 0.31, 0.52, 0.9])
    rb = ra * np.array([0.9, 0.93, 0.95, 0.99, 1.02])
    a = np.column_stack([ra, q])
    b = np.column_stack([rb, q + np.array([0.1, -0.2, 0.15, 0.0, 0.3])])
    with Clock() as clk:
        same = bd_rate(a, a)
        doubled = bd_rate(a, np.column_stack([2 * ra, q]))
        ab, ba = bd_rate(a, b), bd_rate(b, a)
        # swapping curves inverts the rate ratio: 1 + ba/100 == 1 / (1 + ab/100)
        anti = abs(ba - 100 * (1 / (1 + ab / 100) - 1))
        orc = abs(ab - oracles.bd_rate_trapezoid(ra, a[:, 1], rb, b[:, 1]))
    ok = abs(same) < 0.005 and abs(doubled - 100) <= 0.1 and anti <= 0.1 and orc <= 0.1 and clk.s < 1
    report(12, ok, f"identical {same:+.4f}%, doubled {doubled:.4f}%, a->b {ab:+.3f}% b->a {ba:+.3f}% (antisymmetry gap {anti:.1e} pp), oracle gap {orc:.1e} pp; {clk.s:.3f}s")
    assert ok


# ----------------------------------------------------------------------------- 13


def test_c13_toy_training(report):
    data = gaussian_blobs(256, seed=0)
    with Clock() as clk:
        p1, tr1 = train_toy(data, ToyTrainConfig(steps=2000, seed=0))
        p2, tr2 = train_toy(data, ToyTrainConfig(steps=2000, seed=0))
    before, after = tr1["probe"][0][1], tr1["probe"][-1][1]
    det = tr1 == tr2 and all(np.array_equal(p1[k], p2[k]) for k in p1)
    drop = 1 - after / before
    ok = drop >= 0.10 and det and clk.s < 600
    report(13, ok, f"probe eps-MSE {before:.4f} -> {after:.4f} ({100 * drop:.1f}% lower) after 2000 steps, repeat run identical {det}; {clk.s:.1f}s for two runs")
    assert ok
