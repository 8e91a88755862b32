"""Command-line surface for reproducible runs.

Commands: phantom, mask, measure, train, reconstruct, snr, benchmark.
Exit codes: 0 success, 1 contract/usage error, 2 I/O or format error,
3 numerical divergence. All randomness flows from explicit --seed flags.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import persistence
from .autodiff import DivergenceError
from .denoisers import TvConfig, gaussian_denoiser, identity_denoiser, make_tv_denoiser
from .imaging import measure, radial_mask, shepp_logan, snr_db
from .mssn import MODE_MSSN, MODE_SSN, MssnConfig, make_denoiser
from .persistence import FormatError
from .solver import PluginContractError, SolverConfig, pnp_apgm, zero_filled
from .training import TrainConfig, synthesize_image, train


class _CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # contract/usage problems must exit 1, not argparse's default 2
    def error(self, message):
        raise _CliUsageError(message)


def parse_config_text(text):
    """Flat `key = value` lines with # comments; returns a string dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path):
    return parse_config_text(Path(path).read_text())


def _get(cfg, key, cast, default):
    if key not in cfg:
        return default
    raw = cfg[key]
    if cast is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return cast(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_phantom(args):
    persistence.write_imgf(args.out, shepp_logan(args.size))
    print(f"wrote {args.size}x{args.size} phantom to {args.out}")


def _parse_size(text):
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise _CliUsageError(f"--size must look like HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _cmd_mask(args):
    h, w = _parse_size(args.size)
    mask = radial_mask(h, w, args.lines)
    persistence.write_pgm(args.out, mask.astype(np.float64))
    print(f"sampling ratio: {mask.mean():.6f}")


def _read_mask_pgm(path):
    vals = persistence.read_pgm(path)
    levels = np.unique(vals)
    if not np.all(np.isin(levels, [0.0, 1.0])):
        raise FormatError(f"mask PGM must contain only 0/255 pixels: {path}")
    return vals.astype(np.uint8)


def _cmd_measure(args):
    image = persistence.read_imgf(args.image)
    mask = _read_mask_pgm(args.mask)
    y = measure(image, mask, noise_sigma=args.noise, seed=args.seed)
    persistence.write_kspace(args.out, y)
    print(f"wrote k-space measurement to {args.out} "
          f"({int(mask.sum())} of {mask.size} samples)")


def _mssn_config_from(cfg):
    return MssnConfig(
        features=_get(cfg, "features", int, 32),
        blocks=_get(cfg, "blocks", int, 2),
        heads=_get(cfg, "heads", int, 2),
        patch=_get(cfg, "patch", int, 16),
        tie_blocks=_get(cfg, "tie_blocks", bool, True),
        mode=_get(cfg, "mode", str, MODE_MSSN),
    )


def _train_config_from(cfg, data_dir):
    return TrainConfig(
        patch=_get(cfg, "patch", int, 16),
        stride=_get(cfg, "stride", int, 8),
        sigma=_get(cfg, "sigma", float, 5.0 / 255.0),
        epochs=_get(cfg, "epochs", int, 2),
        batch=_get(cfg, "batch", int, 16),
        lr0=_get(cfg, "lr0", float, 1e-3),
        halving_period=_get(cfg, "halving_period", int, 50_000),
        seed=_get(cfg, "seed", int, 0),
        data_dir=data_dir,
    )


def _cmd_train(args):
    cfg = load_config(args.config) if args.config else {}
    train_cfg = _train_config_from(cfg, args.data)
    mssn_cfg = _mssn_config_from(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    weights, curve = train(train_cfg, mssn_cfg, out_dir=out.parent)
    persistence.save_weights(weights, out)
    curve_path = out.with_suffix(".loss.csv")
    curve.to_csv(curve_path)
    print(f"trained {train_cfg.epochs} epochs; final mean loss "
          f"{curve.epoch_mean[-1]:.6g}; weights at {out}; loss curve at {curve_path}")


def _build_denoiser(args):
    name = args.denoiser
    if name == "identity":
        return identity_denoiser
    if name == "gauss":
        return gaussian_denoiser
    if name == "tv":
        return make_tv_denoiser(TvConfig(lambda_scale=args.tv_scale))
    if name in ("mssn", "ssn"):
        if not args.weights:
            raise _CliUsageError(f"--denoiser {name} requires --weights")
        weights = persistence.load_weights(args.weights)
        expected = MODE_MSSN if name == "mssn" else MODE_SSN
        if weights.config.mode != expected:
            raise _CliUsageError(
                f"weights file is a {weights.config.mode} network, not {expected}")
        return make_denoiser(weights)
    raise _CliUsageError(f"unknown denoiser {name!r}")


def _cmd_reconstruct(args):
    y = persistence.read_kspace(args.y)
    denoiser = _build_denoiser(args)
    cfg = SolverConfig(gamma=args.gamma, sigma=args.sigma,
                       max_iters=args.iters, tol=args.tol,
                       accelerated=not args.no_accel)
    ref = persistence.read_imgf(args.ref) if args.ref else None
    x0 = np.zeros(y.mask.shape)
    recon, trace = pnp_apgm(y, x0, denoiser, cfg, ref=ref)
    persistence.write_imgf(args.out, recon)
    if args.trace:
        trace.to_csv(args.trace)
    last = trace.records[-1]
    msg = f"done in {last.k} iterations; final g = {last.g_value:.6g}"
    if ref is not None:
        msg += f"; SNR = {last.snr_db:.4f} dB"
    print(msg)


def _cmd_snr(args):
    a = persistence.read_imgf(args.a)
    b = persistence.read_imgf(args.b)
    print(f"{snr_db(a, b):.6f}")


def _benchmark_denoiser(name, cfg_text):
    if name == "ifft":
        return None
    if name == "identity":
        return identity_denoiser
    if name == "gauss":
        return gaussian_denoiser
    if name == "tv":
        return make_tv_denoiser(TvConfig(
            lambda_scale=_get(cfg_text, "tv_lambda_scale", float, 1.0)))
    if name in ("mssn", "ssn"):
        weights_path = cfg_text.get("weights")
        if not weights_path:
            raise ValueError(f"benchmark denoiser {name!r} needs a 'weights' config key")
        return make_denoiser(persistence.load_weights(weights_path))
    raise ValueError(f"unknown benchmark denoiser {name!r}")


def run_benchmark(cfg_text):
    """Desk-scale matrix of (denoiser x line count) mean SNRs.

    Returns the CSV text; deterministic (bit-identical) for a given
    config + seed.
    """
    size = _get(cfg_text, "phantom_size", int, 128)
    lines_list = [int(v) for v in _get(cfg_text, "lines", str, "36,48").split(",")]
    names = [v.strip() for v in _get(cfg_text, "denoisers", str, "ifft,gauss,tv").split(",")]
    synth = _get(cfg_text, "synthetic_phantoms", int, 0)
    seed = _get(cfg_text, "seed", int, 0)
    noise = _get(cfg_text, "noise", float, 0.0)
    solver_cfg = SolverConfig(
        gamma=_get(cfg_text, "gamma", float, 1.0),
        sigma=_get(cfg_text, "sigma", float, 0.08),
        max_iters=_get(cfg_text, "iters", int, 50),
        tol=0.0, accelerated=True)

    phantoms = [shepp_logan(size)]
    phantoms += [synthesize_image(size, (seed, 1000 + i)) for i in range(synth)]

    rows = ["denoiser,lines,snr_db"]
    for name in names:
        plugin = _benchmark_denoiser(name, cfg_text)
        for lines in lines_list:
            mask = radial_mask(size, size, lines)
            snrs = []
            for pidx, phantom in enumerate(phantoms):
                y = measure(phantom, mask, noise_sigma=noise,
                            seed=(seed, lines, pidx))
                if plugin is None:
                    recon = zero_filled(y)
                else:
                    recon, _ = pnp_apgm(y, np.zeros_like(phantom), plugin, solver_cfg)
                snrs.append(snr_db(recon, phantom))
            rows.append(f"{name},{lines},{np.mean(snrs):.6f}")
    return "\n".join(rows) + "\n"


def _cmd_benchmark(args):
    cfg_text = load_config(args.config)
    csv_text = run_benchmark(cfg_text)
    out = cfg_text.get("out")
    if out:
        Path(out).write_text(csv_text)
        print(f"wrote benchmark CSV to {out}")
    else:
        sys.stdout.write(csv_text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="pnpmri",
                     description="Plug-and-play MRI reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("phantom", help="write a Shepp-Logan phantom as IMGF")
    p.add_argument("--size", type=int, default=128,
                   help="image size N, N >= 16 (default 128)")
    p.add_argument("--out", required=True, help="output IMGF path")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("mask", help="write a radial sampling mask as PGM (0/255)")
    p.add_argument("--size", default="128x128", help="mask dims HxW (default 128x128)")
    p.add_argument("--lines", type=int, required=True,
                   help="radial line count (paper uses 36 and 48)")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("measure", help="synthesize subsampled k-space (KSPC)")
    p.add_argument("--image", required=True, help="input IMGF image")
    p.add_argument("--mask", required=True, help="sampling mask PGM (0/255)")
    p.add_argument("--noise", type=float, default=0.0,
                   help="complex noise std per component (default 0)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", required=True, help="output KSPC path")
    p.set_defaults(func=_cmd_measure)

    p = sub.add_parser(
        "train", help="train the attention denoiser",
        epilog="Config keys and desk defaults: patch=16, stride=8, "
               "sigma=0.0196078, epochs=2, batch=16, lr0=0.001, "
               "halving_period=50000, seed=0, features=32, blocks=2, heads=2, "
               "tie_blocks=true, mode=mssn. Paper-scale values: patch=42, "
               "epochs=80, features=128, blocks=8, heads=2, lr0=0.001, "
               "halving_period=50000, sigma=5/255. See configs/train_default.cfg.")
    p.add_argument("--data", required=True, help="directory of IMGF/PGM training images")
    p.add_argument("--config", help="flat key=value config file (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output weights path (.mssn)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reconstruct", help="run the plug-and-play solver on a KSPC file")
    p.add_argument("--y", required=True, help="input KSPC measurement")
    p.add_argument("--denoiser", required=True,
                   choices=["identity", "gauss", "tv", "mssn", "ssn"],
                   help="denoiser prior")
    p.add_argument("--weights", help="weights file (required for mssn/ssn)")
    p.add_argument("--gamma", type=float, default=1.0,
                   help="step size (default 1.0, safe under the unitary DFT; "
                        "not reported in the original experiments)")
    p.add_argument("--sigma", type=float, default=0.08,
                   help="denoiser strength (default 0.08, desk choice; "
                        "not reported in the original experiments)")
    p.add_argument("--iters", type=int, default=50,
                   help="iteration count K >= 1 (default 50, desk choice)")
    p.add_argument("--tol", type=float, default=0.0,
                   help="relative-change early stop (default 0: run all iters)")
    p.add_argument("--no-accel", action="store_true",
                   help="disable momentum (plain proximal gradient)")
    p.add_argument("--tv-scale", type=float, default=1.0,
                   help="TV weight as a multiple of sigma (default 1.0)")
    p.add_argument("--ref", help="reference IMGF enabling the SNR trace column")
    p.add_argument("--out", required=True, help="output IMGF path")
    p.add_argument("--trace", help="per-iteration CSV trace path")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("snr", help="print SNR of image A against reference B")
    p.add_argument("--a", required=True, help="test image (IMGF)")
    p.add_argument("--b", required=True, help="reference image (IMGF)")
    p.set_defaults(func=_cmd_snr)

    p = sub.add_parser(
        "benchmark", help="desk-scale denoiser x line-count SNR matrix",
        epilog="Config keys: phantom_size=128, lines=36,48, "
               "denoisers=ifft,gauss,tv[,mssn,ssn], synthetic_phantoms=0, "
               "seed=0, noise=0, gamma=1.0, sigma=0.08, iters=50, "
               "tv_lambda_scale=1.0, weights=<path for mssn/ssn>, out=<csv path>. "
               "The 36/48 line counts mirror the original experiments.")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.set_defaults(func=_cmd_benchmark)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_usage(sys.stderr)
            return 1
        args.func(args)
        return 0
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else exc.code
    except _CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, PluginContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
