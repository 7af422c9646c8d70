"""Latency of entropy-parameter inference (no range coding, no file I/O)."""

from __future__ import annotations

import time

import numpy as np

from .._validation import make_rng
from ..entropy.model import EntropyConfig, EntropyModel, init_entropy_weights


def random_latent(h, w, M, seed=0, scale=3.0):
    return np.clip(np.rint(make_rng(seed).normal(0.0, scale, (h, w, M))), -64, 64)


def _params_equal(a, b):
    return a.keys() == b.keys() and all(
        np.array_equal(a[k][0], b[k][0]) and np.array_equal(a[k][1], b[k][1]) and np.array_equal(a[k][2], b[k][2])
        for k in a
    )


def _median_ms(fn, runs, warmup=True):
    if warmup:
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def bench_entropy_latency(model: EntropyModel | None = None, latent_dims=(48, 32), threads=(1, 4), runs=20, sequential_runs=3, seed=0):
    """Median milliseconds for all chunk/phase parameters of one latent.

    Parallel mode (one pass per chunk and phase, split over ``threads``) is
    timed for each thread count; sequential mode evaluates one position at a
    time (skipped when ``sequential_runs`` is 0).  ``identical`` reports
    whether every timed mode produced the same bits.
    """
    if model is None:
        cfg = EntropyConfig()
        model = EntropyModel(cfg, init_entropy_weights(cfg, seed=seed))
    if runs < 1 or sequential_runs < 0:
        raise ValueError("need at least one timed run")
    h, w = latent_dims
    y = random_latent(h, w, model.config.M, seed)
    z = model.hyper_analysis(y) if model.config.has("hyper") else None
    ref = model.all_params(y, z, threads=1)
    result = {"latent_dims": (h, w), "parallel_ms": {}, "runs": runs, "sequential_runs": sequential_runs}
    identical = True
    for t in threads:
        result["parallel_ms"][t] = _median_ms(lambda: model.all_params(y, z, threads=t), runs)
        identical &= _params_equal(ref, model.all_params(y, z, threads=t))
    if sequential_runs == 0:
        result["sequential_ms"] = None
        result["identical"] = bool(identical)
        return result
    seq = {}

    def run_seq():
        seq["p"] = model.all_params(y, z, mode="sequential")

    # a sequential pass is long enough that warm-up effects are negligible
    result["sequential_ms"] = _median_ms(run_seq, sequential_runs, warmup=False)
    identical &= _params_equal(ref, seq["p"])
    result["identical"] = bool(identical)
    return result
