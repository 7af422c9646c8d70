"""Command-line entry point: ``fdcodec <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .codec.container import FormatError, parse_header, save_weights, load_weights
from .codec.imageio import from_field, read_pnm, to_field, write_pnm
from .codec.pipeline import CodecConfig, decode, decode_latent, encode, init_codec_weights, synthesize
from .denoiser import ToyTrainConfig, train_toy
from .schedules import ScheduleConfig, build_schedule, schedule_header, schedule_rows
from .spectral import frequency_grid


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _infer_config(weights, args):
    """M and C_z come from tensor shapes; everything else from flags."""
    try:
        M = weights["ana.3.w"].shape[3]
    except KeyError:
        raise FormatError("weights lack the analysis transform (ana.*)") from None
    C_z = weights["ent.zprior.mu"].shape[0] if "ent.zprior.mu" in weights else 1
    return CodecConfig(
        M=M,
        C_z=C_z,
        N=args.window,
        T=args.T,
        sigma_b_max=args.sigma_b_max,
        d_min=args.d_min,
        noise_mode=args.noise_mode,
        seed=args.seed,
        lambda_preset=args.lambda_preset,
    )


def _add_diffusion_flags(p, steps_name="--T"):
    p.add_argument(steps_name, dest="T", type=int, default=500)
    p.add_argument("--sigma-b-max", type=float, default=25.0)
    p.add_argument("--d-min", type=float, default=0.001)


# ----------------------------------------------------------------------------- commands


def cmd_schedule_dump(args):
    cfg = ScheduleConfig(args.T, args.sigma_b_max, args.d_min)
    table = build_schedule(cfg, frequency_grid(args.width, args.height))
    _write_csv(args.out, schedule_header(table), schedule_rows(table))


def cmd_init_weights(args):
    cfg = CodecConfig(M=args.M, C_z=args.C_z, N=args.window)
    w = init_codec_weights(cfg, args.channels, args.seed, args.analysis_width, args.denoiser_features)
    save_weights(args.out, w)


def cmd_encode(args):
    weights = load_weights(args.weights)
    x = to_field(read_pnm(args.inp))
    data, rep = encode(x, weights, _infer_config(weights, args), threads=args.threads)
    Path(args.out).write_bytes(data)
    print(f"{rep.total_bytes} bytes, {rep.bpp:.4f} bpp, {rep.clamp_count} clamped latents")


def cmd_decode(args):
    weights = load_weights(args.weights)
    x = decode(Path(args.inp).read_bytes(), weights, steps_override=args.steps_override)
    write_pnm(args.out, from_field(x))


def cmd_inspect(args):
    header, size = parse_header(Path(args.inp).read_bytes())
    d = asdict(header)
    d["header_bytes"] = size
    print(json.dumps(d, indent=2))


def cmd_sample(args):
    weights = load_weights(args.weights)
    if args.bitstream:
        y_hat, h = decode_latent(Path(args.bitstream).read_bytes(), weights)
        hw = (h.H, h.W)
        T, sbm, dmin = h.T, h.sigma_b_max, h.d_min
        seed = h.seed if args.seed is None else args.seed
        mode = h.noise_mode if args.noise_mode is None else args.noise_mode
    else:
        y_hat = np.load(args.latent)
        hw = None
        T, sbm, dmin = 500, args.sigma_b_max, args.d_min
        seed = 0 if args.seed is None else args.seed
        mode = args.noise_mode or "fresh-noise"
    x = synthesize(y_hat, weights, args.steps or T, sbm, dmin, seed, mode, out_hw=hw)
    write_pnm(args.out, from_field(x))


def cmd_train_toy(args):
    files = sorted(p for p in Path(args.data).iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not files:
        raise SystemExit(f"no .ppm/.pgm images in {args.data}")
    imgs = [to_field(read_pnm(f)) for f in files]
    h = min(i.shape[0] for i in imgs) // 16 * 16
    w = min(i.shape[1] for i in imgs) // 16 * 16
    if h == 0 or w == 0 or len({i.shape[2] for i in imgs}) != 1:
        raise SystemExit("images must share a channel count and be at least 16x16")
    data = np.stack([i[:h, :w] for i in imgs])
    cfg = ToyTrainConfig(
        steps=args.steps,
        lam=args.lam,
        seed=args.seed,
        features=args.features,
        lr=args.lr,
        T=args.T,
        sigma_b_max=args.sigma_b_max,
        d_min=args.d_min,
    )
    params, trace = train_toy(data, cfg)
    save_weights(args.out, params)
    probe = dict(trace["probe"])
    rows = ([i + 1, l, m, probe.get(i + 1, "")] for i, (l, m) in enumerate(zip(trace["loss"], trace["mse"])))
    _write_csv(args.trace or str(Path(args.out).with_suffix(".csv")), ["step", "loss", "mse", "probe_mse"], rows)
    print(f"probe eps-MSE {trace['probe'][0][1]:.5f} -> {trace['probe'][-1][1]:.5f}")


def cmd_bench(args):
    if args.kind == "latency":
        from .eval.bench import bench_entropy_latency

        r = bench_entropy_latency(latent_dims=(args.height, args.width), threads=tuple(args.threads), runs=args.runs)
        rows = [[f"parallel-{t}", ms, r["identical"]] for t, ms in r["parallel_ms"].items()]
        rows.append(["sequential", r["sequential_ms"], r["identical"]])
        _write_csv(args.out, ["mode", "median_ms", "bit_identical"], rows)
    else:
        from .eval.context import SourceConfig, context_benefit

        rows = context_benefit(SourceConfig(rho_s=args.rho_s, rho_c=args.rho_c), seed=args.seed)
        _write_csv(
            args.out,
            ["variant", "bits_per_symbol", "bpp", "ideal_bits_per_symbol", "lower_bound"],
            ([r["variant"], r["bps"], r["bpp"], r["ideal_bps"], r["bound_bps"]] for r in rows),
        )
    print(Path(args.out).read_text(), end="")


def _read_curve(path):
    pts = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except ValueError:
                if pts:
                    raise
    return np.array(pts)


def cmd_bdrate(args):
    from .eval.metrics import bd_rate

    print(f"{bd_rate(_read_curve(args.a), _read_curve(args.b)):+.3f}%")


# ----------------------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="fdcodec", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule-dump", help="per-t scalars and per-frequency d(t) as CSV")
    _add_diffusion_flags(p)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_schedule_dump)

    p = sub.add_parser("init-weights", help="write deterministic random codec weights")
    p.add_argument("--out", required=True)
    p.add_argument("--M", type=int, default=192)
    p.add_argument("--C-z", dest="C_z", type=int, default=32)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--analysis-width", type=int, default=64)
    p.add_argument("--denoiser-features", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_init_weights)

    p = sub.add_parser("encode", help="image (PPM/PGM) -> bitstream")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-preset", type=int, default=None)
    p.add_argument("--window", type=int, default=4)
    _add_diffusion_flags(p)
    p.add_argument("--noise-mode", default="fresh-noise", choices=("fresh-noise", "paper-literal"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="bitstream -> image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps-override", type=int, default=None)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("inspect", help="print a bitstream header as JSON")
    p.add_argument("--in", dest="inp", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("sample", help="diffusion decode from a bitstream or a saved latent (.npy)")
    p.add_argument("--weights", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bitstream")
    src.add_argument("--latent")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-mode", default=None, choices=("fresh-noise", "paper-literal"))
    p.add_argument("--sigma-b-max", type=float, default=25.0)
    p.add_argument("--d-min", type=float, default=0.001)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train-toy", help="train the toy denoiser on a directory of PPM/PGM images")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    _add_diffusion_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None, help="loss-trace CSV (default: next to --out)")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("bench", help="entropy-parameter latency or context-benefit experiment")
    p.add_argument("--kind", choices=("latency", "context"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--rho-s", type=float, default=0.9)
    p.add_argument("--rho-c", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("bdrate", help="BD-rate of curve b against curve a (CSV rows: bpp,psnr)")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(fn=cmd_bdrate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (FormatError, ValueError, OSError) as e:
        print(f"fdcodec: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
