"""Command-line entry points: estimate, simulate, evaluate, measure, phantom.

Exit codes: 0 success, 2 bad input data, 3 numerical abort, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, simulate, trainer
from .gan import ProfileError, load_profile, load_profile_meta, save_profile
from .trainer import CheckpointError, TrainConfig, TrainingAborted
from .volume import VolumeError, head_mask, load_volume, save_volume

EXIT_OK = 0
EXIT_DATA = 2
EXIT_ABORT = 3
EXIT_USAGE = 64

log = logging.getLogger("sliceprof")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed():
    value = os.environ.get("RNG_SEED")
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"RNG_SEED must be an integer, got {value!r}") from None


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


def _nonneg_int(text):
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return n


# --- SVG -------------------------------------------------------------------

def profile_svg(profile, width=480, height=280, margin=40):
    """Polyline of the taps over offset in mm, with a few axis ticks."""
    x = profile.offsets_mm()
    y = profile.taps
    ymax = float(y.max()) or 1.0
    x0, x1 = float(x[0]), float(x[-1])
    span = (x1 - x0) or 1.0

    def px(v):
        return margin + (v - x0) / span * (width - 2 * margin)

    def py(v):
        return height - margin - v / ymax * (height - 2 * margin)

    points = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for v in np.linspace(x0, x1, 5):
        parts.append(f'<text x="{px(v):.2f}" y="{height - margin + 16}" font-size="10" '
                     f'text-anchor="middle">{v:g}</text>')
    for v in np.linspace(0, ymax, 3):
        parts.append(f'<text x="{margin - 4}" y="{py(v):.2f}" font-size="10" '
                     f'text-anchor="end">{v:.2f}</text>')
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{points}"/>')
    parts.append(f'<text x="{width / 2}" y="{height - 6}" font-size="11" '
                 f'text-anchor="middle">offset (mm)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- commands --------------------------------------------------------------

def _config_from(args, seed):
    return TrainConfig(iterations=args.iters, batch_size=args.batch, scale=args.scale,
                       seed=seed, report_every=0 if args.quiet else 100)


def _run_estimate(volume, config, checkpoint=None):
    state = None
    if checkpoint is not None and Path(checkpoint).exists():
        state, saved = trainer.checkpoint_load(checkpoint)
        config = TrainConfig(**{**saved.__dict__, "iterations": config.iterations})
        log.info("resuming from %s at iteration %d", checkpoint, state.iteration)
    t = trainer.Trainer(volume, config, state=state)
    try:
        profile = t.run()
    finally:
        if checkpoint is not None:
            trainer.checkpoint_save(t.state, checkpoint, config)
    return profile, list(t.state.history)


def cmd_estimate(args):
    seed = args.seed if args.seed is not None else _default_seed()
    volume = load_volume(args.inp)
    profile, history = _run_estimate(volume, _config_from(args, seed), args.checkpoint)
    out = Path(args.out)
    save_profile(profile, out)
    if args.svg:
        Path(args.svg).write_text(profile_svg(profile))
    if args.history:
        Path(args.history).write_text(trainer.history_csv(history))
    try:
        log.info("FWHM %.4f mm", metrics.fwhm(profile))
    except metrics.MeasurementError:
        pass
    return EXIT_OK


def cmd_simulate(args):
    volume = load_volume(args.inp)
    spec = simulate.TruthProfileSpec(args.kind, args.fwhm, volume.spacing[2], args.taps)
    truth = simulate.make_profile(spec)
    lr = simulate.degrade_volume(volume, truth, args.scale)
    save_volume(lr, args.out)
    save_profile(truth, args.truth, kind=args.kind, fwhm_mm=args.fwhm, scale=args.scale)
    return EXIT_OK


def evaluate_profiles(truth, estimate, hr, scale, mask_frac=0.1, config=None):
    """Degrade ``hr`` with both profiles and compare; see :class:`metrics.EvalReport`."""
    if not np.isclose(truth.spacing_mm, estimate.spacing_mm):
        raise ValueError(f"profile grids differ: truth spacing {truth.spacing_mm} mm, "
                         f"estimate spacing {estimate.spacing_mm} mm")
    ref = simulate.degrade_volume(hr, truth, scale)
    test = simulate.degrade_volume(hr, estimate, scale)
    if ref.extents != test.extents:
        raise ValueError(f"degraded grids differ: {ref.extents} vs {test.extents}; "
                         "profiles must have the same length")
    mask = head_mask(ref, mask_frac)
    f_true, f_est = metrics.fwhm(truth), metrics.fwhm(estimate)
    return metrics.EvalReport(
        fwhm_true_mm=f_true,
        fwhm_est_mm=f_est,
        fwhm_error_mm=abs(f_true - f_est),
        profile_error=metrics.profile_error(truth, estimate),
        psnr_db=metrics.psnr(ref, test, mask),
        ssim=metrics.ssim(ref, test, mask),
        psnr_peak=float(ref.data[mask].max()),
        config=dict(config or {}, scale=scale, mask_frac=mask_frac),
    )


def _evaluate_one(truth_path, est_path, hr, scale, mask_frac):
    truth, meta = load_profile_meta(truth_path)
    scale = scale if scale is not None else meta.get("scale")
    if scale is None:
        raise UsageError("--scale is required when truth.json does not record it")
    config = {k: meta[k] for k in ("kind", "fwhm_mm") if k in meta}
    return evaluate_profiles(truth, load_profile(est_path), hr, int(scale), mask_frac, config)


def cmd_evaluate(args):
    hr = load_volume(args.hr)
    if args.batch:
        reports = []
        for run in sorted(p for p in Path(args.batch).iterdir() if p.is_dir()):
            truth, est = run / "truth.json", run / "k.json"
            if not (truth.exists() and est.exists()):
                continue
            report = _evaluate_one(truth, est, hr, args.scale, args.mask_frac)
            (run / "report.json").write_text(report.to_json())
            reports.append(report)
        if not reports:
            raise UsageError(f"no run directories with truth.json and k.json under {args.batch}")
        Path(args.out).write_text(metrics.report_table(reports))
        return EXIT_OK
    if not (args.truth and args.est):
        raise UsageError("evaluate needs --truth and --est (or --batch DIR)")
    report = _evaluate_one(args.truth, args.est, hr, args.scale, args.mask_frac)
    Path(args.out).write_text(report.to_json())
    return EXIT_OK


def measure_fwhm(volume, config, repeat):
    """FWHM in mm from ``repeat`` estimates with consecutive seeds."""
    widths = []
    for i in range(repeat):
        profile, _ = _run_estimate(volume, TrainConfig(**{**config.__dict__, "seed": config.seed + i}))
        widths.append(metrics.fwhm(profile))
    sd = float(np.std(widths, ddof=1)) if repeat > 1 else 0.0
    return {"fwhm_mm": widths, "mean": float(np.mean(widths)), "sd": sd,
            "seeds": [config.seed + i for i in range(repeat)],
            "spacing_mm": list(volume.spacing)}


def cmd_measure(args):
    seed = args.seed if args.seed is not None else _default_seed()
    volume = load_volume(args.inp)
    result = measure_fwhm(volume, _config_from(args, seed), args.repeat)
    Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(f"FWHM {result['mean']:.4f} mm (SD {result['sd']:.4f} mm, n={args.repeat})")
    return EXIT_OK


def cmd_phantom(args):
    seed = args.seed if args.seed is not None else _default_seed()
    if args.size < 32:
        raise UsageError(f"--size must be at least 32, got {args.size}")
    save_volume(simulate.make_phantom(seed, (args.size,) * 3), args.out)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--in", dest="inp", required=True, help="input volume")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=_nonneg_int, default=TrainConfig.iterations)
    p.add_argument("--batch", type=_positive_int, default=TrainConfig.batch_size)
    p.add_argument("--scale", type=_positive_int, default=None,
                   help="through-plane / in-plane spacing ratio (default: from header)")
    p.add_argument("--seed", type=int, default=None, help="default: $RNG_SEED or 0")


def build_parser():
    parser = _Parser(prog="sliceprof", description="Slice profile estimation from a single volume.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate the relative slice profile")
    _add_training_flags(p)
    p.add_argument("--checkpoint", help="resume from / save to this file")
    p.add_argument("--history", help="write per-iteration losses as CSV")
    p.add_argument("--svg", help="write a line plot of the taps")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="blur and downsample a volume through-plane")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--kind", required=True, choices=simulate.KINDS)
    p.add_argument("--fwhm", type=float, required=True, help="mm")
    p.add_argument("--scale", type=_positive_int, required=True)
    p.add_argument("--taps", type=_positive_int, default=21)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="compare an estimate with the true profile")
    p.add_argument("--truth")
    p.add_argument("--est")
    p.add_argument("--hr", required=True)
    p.add_argument("--scale", type=_positive_int, default=None)
    p.add_argument("--mask-frac", type=float, default=0.1)
    p.add_argument("--batch", help="directory of runs, each with truth.json and k.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("measure", help="report the FWHM of the estimated profile")
    _add_training_flags(p)
    p.add_argument("--repeat", type=_positive_int, default=1)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("phantom", help="write a procedural isotropic phantom")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"sliceprof {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as err:
        print(f"sliceprof {args.command}: {err}", file=sys.stderr)
        return EXIT_ABORT
    except (VolumeError, ProfileError, CheckpointError, metrics.MeasurementError,
            ValueError, OSError) as err:
        print(f"sliceprof {args.command}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
