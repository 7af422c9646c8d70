"""Image -> latent -> bitstream -> latent -> image."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator

from .._validation import check_image, check_latent, make_rng
from ..coder import DEFAULT_L, decode_symbols, discretize_gaussian, encode_symbols
from ..denoiser import PARAM_NAMES, ToyTrainConfig, denoiser_forward, init_params, train_toy
from ..diffusion import NOISE_MODES, decode_image
from ..entropy.layout import PHASES, checkerboard_masks
from ..entropy.model import EntropyConfig, EntropyModel, init_entropy_weights
from ..schedules import ScheduleConfig, build_schedule
from ..spectral import frequency_grid
from .container import (
    LAMBDA_PRESETS,
    BitstreamHeader,
    FormatError,
    as_float32,
    pack_bitstream,
    unpack_bitstream,
)

STRIDE = 16
N_ANALYSIS = 4


@dataclass(frozen=True)
class CodecConfig:
    M: int = 192
    C_z: int = 32
    N: int = 4
    T: int = 500
    sigma_b_max: float = 25.0
    d_min: float = 0.001
    noise_mode: str = "fresh-noise"
    seed: int = 0
    lambda_preset: int | None = None

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.lambda_preset is not None and not 0 <= self.lambda_preset < len(LAMBDA_PRESETS):
            raise ValueError(f"lambda preset index must be in [0, {len(LAMBDA_PRESETS)})")
        ScheduleConfig(self.T, self.sigma_b_max, self.d_min)
        EntropyConfig(self.M, self.C_z, self.N)

    @property
    def entropy(self):
        return EntropyConfig(M=self.M, C_z=self.C_z, N=self.N)


# ----------------------------------------------------------------------------- weights


def init_codec_weights(config: CodecConfig, channels=3, seed=0, analysis_width=64, denoiser_features=32, **entropy_widths):
    """Random analysis / entropy / denoiser weights, rounded to float32 (what a weights file holds)."""
    rng = make_rng(seed)
    w = {}
    cin = channels
    for i in range(N_ANALYSIS):
        cout = config.M if i == N_ANALYSIS - 1 else analysis_width
        w[f"ana.{i}.w"] = rng.standard_normal((3, 3, cin, cout)) * np.sqrt(2.0 / (9 * cin))
        w[f"ana.{i}.b"] = np.zeros(cout)
        cin = cout
    # last layer scaled so latents span a few integers
    w[f"ana.{N_ANALYSIS - 1}.w"] *= 2.0
    ent = init_entropy_weights(config.entropy, seed=int(rng.integers(2**31)), **entropy_widths)
    w.update({f"ent.{k}": v for k, v in ent.items()})
    den = init_params(channels, config.M, denoiser_features, seed=int(rng.integers(2**31)))
    w.update({f"den.{k}": v for k, v in den.items()})
    return as_float32(w)


def _sub(weights, prefix):
    return {k[len(prefix) :]: v for k, v in weights.items() if k.startswith(prefix)}


def entropy_model(weights, config: EntropyConfig) -> EntropyModel:
    return EntropyModel(config, _sub(weights, "ent."))


def denoiser_params(weights):
    p = _sub(weights, "den.")
    missing = [k for k in PARAM_NAMES if k not in p]
    if missing:
        raise FormatError(f"weights lack denoiser tensors {missing}")
    return p


# ----------------------------------------------------------------------------- analysis / quantization


def pad_to_multiple(x, m=STRIDE):
    """Reflect-pad (H, W, C) at the bottom/right to multiples of ``m``.

    Reflection needs pad < dim; thinner images fall back to edge replication.
    """
    h, w = x.shape[:2]
    ph, pw = (-h) % m, (-w) % m
    mode_h = "reflect" if ph < h else "edge"
    x = np.pad(x, ((0, ph), (0, 0), (0, 0)), mode=mode_h)
    mode_w = "reflect" if pw < w else "edge"
    return np.pad(x, ((0, 0), (0, pw), (0, 0)), mode=mode_w)


def conv3x3_s2(x, w, b):
    """Zero-padded 3x3 stride-2 convolution; output ceil(H/2) x ceil(W/2)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))[::2, ::2]  # oh, ow, C, 3, 3
    oh, ow = -(-x.shape[0] // 2), -(-x.shape[1] // 2)
    win = win[:oh, :ow]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(oh, ow, -1)
    return cols @ w.reshape(-1, w.shape[3]) + b


def analyze(x, weights):
    """(H, W, C) field -> real latent (ceil(H/16), ceil(W/16), M)."""
    x = check_image(x)
    h = pad_to_multiple(x)
    for i in range(N_ANALYSIS):
        try:
            w, b = weights[f"ana.{i}.w"], weights[f"ana.{i}.b"]
        except KeyError:
            raise FormatError(f"weights lack analysis layer {i}") from None
        if w.shape[2] != h.shape[2]:
            raise ValueError(f"analysis layer {i} expects {w.shape[2]} channels, got {h.shape[2]}")
        h = conv3x3_s2(h, w, b)
        if i < N_ANALYSIS - 1:
            h = np.maximum(h, 0.0)
    return h


def quantize(y, mode="round", seed=None):
    """``round``: half-to-even rounding; ``noise``: y + U(-1/2, 1/2)."""
    y = np.asarray(y, dtype=np.float64)
    if mode == "round":
        return np.rint(y)
    if mode == "noise":
        if seed is None:
            raise ValueError("noise mode needs a seed")
        return y + make_rng(seed).uniform(-0.5, 0.5, y.shape)
    raise ValueError(f"mode must be 'round' or 'noise', got {mode!r}")


def clamp_latent(y_hat, L=DEFAULT_L):
    """Clip to [-L, L]; returns ``(clipped, number_of_clipped_values)``."""
    return np.clip(y_hat, -L, L), int(np.count_nonzero(np.abs(y_hat) > L))


# ----------------------------------------------------------------------------- latent coding


def _decode(seg, mu, sigma):
    tab = discretize_gaussian(mu.reshape(-1), sigma.reshape(-1))
    return decode_symbols(seg, tab).astype(np.float64).reshape(mu.shape)


def z_shape(h, w, C_z):
    return (-(-(-(-h // 2)) // 2), -(-(-(-w // 2)) // 2), C_z)


def latent_segments(y_hat, model: EntropyModel, threads=1, mode="parallel"):
    """``(symbols, PmfTable)`` of every segment, in bitstream order.

    Segment 0 is ``z_hat`` (empty without a hyperprior); then, per chunk,
    anchors and non-anchors, each as positions in row-major order times the
    chunk's channels.
    """
    y_hat = check_latent(y_hat)
    if y_hat.shape[2] != model.config.M:
        raise ValueError(f"latent has {y_hat.shape[2]} channels, model expects {model.config.M}")
    if np.any(np.abs(y_hat) > model.config.L) or np.any(y_hat != np.rint(y_hat)):
        raise ValueError("latent must be integer-valued within [-L, L]")
    out = []
    z_hat = None
    if model.config.has("hyper"):
        z_hat = model.hyper_analysis(y_hat)
        mu, sg = model.z_params(z_hat.shape)
        out.append((z_hat.reshape(-1), discretize_gaussian(mu, sg)))
    else:
        out.append((np.zeros(0), None))
    params = model.all_params(y_hat, z_hat, threads=threads, mode=mode)
    flat = y_hat.reshape(-1, y_hat.shape[2])
    lay = model.config.layout
    for j in range(lay.n_chunks):
        for phase in PHASES:
            rows, mu, sg = params[(j, phase)]
            out.append((flat[rows][:, lay.slice(j)].reshape(-1), discretize_gaussian(mu.reshape(-1), sg.reshape(-1))))
    return out


def encode_latent(y_hat, model: EntropyModel, threads=1, mode="parallel"):
    """Segments ``[z_hat, (chunk0 anchors, chunk0 non-anchors), ...]`` as bytes."""
    return [b"" if tab is None else encode_symbols(sym.astype(np.int64), tab) for sym, tab in latent_segments(y_hat, model, threads, mode)]


def decode_latent_segments(segs, model: EntropyModel, latent_hw, threads=1):
    """Inverse of :func:`encode_latent`.  Undecoded entries hold NaN while decoding."""
    cfg = model.config
    h, w = latent_hw
    lay = cfg.layout
    if len(segs) != 1 + 2 * lay.n_chunks:
        raise FormatError("wrong number of segments")
    z_hat = None
    if cfg.has("hyper"):
        zs = z_shape(h, w, cfg.C_z)
        mu, sg = model.z_params(zs)
        z_hat = _decode(segs[0], mu, sg).reshape(zs)
    hf = model.hyper_features(z_hat, (h, w))
    y = np.full((h, w, cfg.M), np.nan)
    flat = y.reshape(-1, cfg.M)
    part = checkerboard_masks(h, w)
    k = 1
    for j in range(lay.n_chunks):
        for phase in PHASES:
            rows = np.flatnonzero(part.mask(phase).reshape(-1))
            mu, sg = model.chunk_params(y, hf, j, phase, rows, threads=threads)
            flat[rows, lay.slice(j)] = _decode(segs[k], mu, sg)
            k += 1
    if np.any(np.isnan(y)):
        raise FormatError("latent not fully decoded")
    return y


# ----------------------------------------------------------------------------- file level


@dataclass
class EncodeReport:
    total_bytes: int
    header_bytes: int
    segment_bytes: tuple
    pixels: int
    clamp_count: int

    @property
    def bpp(self):
        return self.total_bytes * 8 / self.pixels


def encode(x, weights, config: CodecConfig, threads=1):
    """Field in [-1, 1] -> ``(bitstream, report)``."""
    x = check_image(x)
    y_hat, clamped = clamp_latent(quantize(analyze(x, weights)))
    model = entropy_model(weights, config.entropy)
    segs = encode_latent(y_hat, model, threads=threads)
    header = BitstreamHeader(
        H=x.shape[0],
        W=x.shape[1],
        M=config.M,
        T=config.T,
        sigma_b_max=config.sigma_b_max,
        d_min=config.d_min,
        C_z=config.C_z,
        N=config.N,
        noise_mode=config.noise_mode,
        seed=config.seed,
        channels=x.shape[2],
        chunk_sizes=config.entropy.layout.sizes,
        lambda_preset=config.lambda_preset,
        clamp_count=clamped,
    )
    data = pack_bitstream(header, segs)
    seg_bytes = tuple(len(s) for s in segs)
    report = EncodeReport(len(data), len(data) - sum(seg_bytes), seg_bytes, x.shape[0] * x.shape[1], clamped)
    return data, report


def decode_latent(data, weights, threads=1):
    """Bitstream -> ``(y_hat, header)`` using only the bytes and the weights."""
    header, segs, _ = unpack_bitstream(data)
    cfg = EntropyConfig(M=header.M, C_z=header.C_z, N=header.N)
    if cfg.layout.sizes != header.chunk_sizes:
        raise FormatError("chunk layout in header does not match M")
    model = entropy_model(weights, cfg)
    lh, lw = -(-header.H // STRIDE), -(-header.W // STRIDE)
    return decode_latent_segments(segs, model, (lh, lw), threads=threads), header


def synthesize(
    y_hat,
    weights,
    T,
    sigma_b_max,
    d_min,
    seed,
    noise_mode="fresh-noise",
    out_hw=None,
    clip_denoised=True,
    callback=None,
):
    """Diffusion decode of a latent: ancestral sampling conditioned on ``y_hat``.

    Sampling runs on the padded grid (16 x latent size) and the result is
    cropped to ``out_hw`` and clipped to [-1, 1].
    """
    y_hat = check_latent(y_hat)
    params = denoiser_params(weights)
    channels = params["w3"].shape[3]
    expect = channels + y_hat.shape[2]
    if params["w1"].shape[2] != expect:
        raise FormatError(f"denoiser expects {params['w1'].shape[2]} input channels, latent needs {expect}")
    hp, wp = y_hat.shape[0] * STRIDE, y_hat.shape[1] * STRIDE
    table = build_schedule(ScheduleConfig(int(T), sigma_b_max, d_min), frequency_grid(wp, hp))

    def den(z, t, y):
        return denoiser_forward(params, z, t, y, table.T)

    x = decode_image(
        y_hat,
        den,
        table,
        seed,
        noise_mode,
        shape=(hp, wp, channels),
        clip_denoised=clip_denoised,
        callback=callback,
    )
    h, w = out_hw if out_hw is not None else (hp, wp)
    return np.clip(x[:h, :w], -1.0, 1.0)


def decode(data, weights, steps_override=None, clip_denoised=True, callback=None, seed=None, noise_mode=None):
    """Bitstream -> reconstructed field (H, W, C) in [-1, 1].

    ``seed`` and ``noise_mode`` default to the values stored in the header.
    """
    y_hat, header = decode_latent(data, weights)
    if denoiser_params(weights)["w3"].shape[3] != header.channels:
        raise FormatError("denoiser channel count does not match the bitstream")
    return synthesize(
        y_hat,
        weights,
        header.T if steps_override is None else int(steps_override),
        header.sigma_b_max,
        header.d_min,
        header.seed if seed is None else seed,
        header.noise_mode if noise_mode is None else noise_mode,
        out_hw=(header.H, header.W),
        clip_denoised=clip_denoised,
        callback=callback,
    )


# ----------------------------------------------------------------------------- estimator


class NeuralCodec(BaseEstimator):
    """Estimator facade.  ``fit`` initialises weights (and optionally trains the
    denoiser on the given images); ``transform`` gives quantized latents;
    ``predict`` round-trips images through the bitstream."""

    def __init__(
        self,
        M=192,
        C_z=32,
        window=4,
        T=500,
        sigma_b_max=25.0,
        d_min=0.001,
        noise_mode="fresh-noise",
        seed=0,
        analysis_width=64,
        denoiser_features=32,
        denoiser_steps=0,
        lr=1e-4,
        weights=None,
    ):
        self.M = M
        self.C_z = C_z
        self.window = window
        self.T = T
        self.sigma_b_max = sigma_b_max
        self.d_min = d_min
        self.noise_mode = noise_mode
        self.seed = seed
        self.analysis_width = analysis_width
        self.denoiser_features = denoiser_features
        self.denoiser_steps = denoiser_steps
        self.lr = lr
        self.weights = weights

    def _cfg(self):
        return CodecConfig(self.M, self.C_z, self.window, self.T, self.sigma_b_max, self.d_min, self.noise_mode, self.seed)

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        cfg = self._cfg()
        if self.weights is not None:
            w = as_float32(self.weights)
        else:
            w = init_codec_weights(cfg, X.shape[-1], self.seed, self.analysis_width, self.denoiser_features)
        if self.denoiser_steps:
            tc = ToyTrainConfig(
                steps=self.denoiser_steps,
                features=self.denoiser_features,
                lr=self.lr,
                seed=self.seed,
                T=self.T,
                sigma_b_max=self.sigma_b_max,
                d_min=self.d_min,
            )
            Xp = np.stack([pad_to_multiple(x) for x in X])

            def enc(xb):
                return np.stack([analyze(xi, w) for xi in xb])

            den, self.trace_ = train_toy(Xp, tc, encoder=enc, params=denoiser_params(w))
            w.update(as_float32({f"den.{k}": v for k, v in den.items()}))
        self.weights_ = w
        self.config_ = cfg
        return self

    def _check(self):
        if not hasattr(self, "weights_"):
            raise AttributeError("NeuralCodec is not fitted")

    def transform(self, X):
        self._check()
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim <= 3
        Xb = [X] if single else list(X)
        out = [clamp_latent(quantize(analyze(x, self.weights_)))[0] for x in Xb]
        return out[0] if single else np.stack(out)

    def encode(self, x, threads=1):
        self._check()
        return encode(x, self.weights_, self.config_, threads=threads)

    def decode(self, data, steps_override=None):
        self._check()
        return decode(data, self.weights_, steps_override)

    def predict(self, X, steps_override=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim <= 3:
            return self.decode(self.encode(X)[0], steps_override)
        return np.stack([self.decode(self.encode(x)[0], steps_override) for x in X])

    def config_dict(self):
        self._check()
        return asdict(self.config_)
