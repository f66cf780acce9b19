"""Command-line entry point: ``hdcblur <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench
from .distortion import CoordMap, OutOfModelError, render_chessboard, warp_image
from .estimation import EstimationConfig, EstimationDiverged, PairedDataset, estimate, write_loss_trace
from .forward import NoiseSpec, add_noise, apply, load_model, residual, save_model
from .image import Boundary, ImageFormatError, load_image, save_image
from .reconstruction import (IllPosedError, ReconstructorError, UnknownLevelError, deblur,
                             load_registry)
from .scoring import OCR_ENV_VAR, NoRecognizerError, RecognizerError, evaluate_level
from .synth import StreamConfig, TextSpec, stream, write_dataset

DEFAULT_SEED = 0

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("hdcblur")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return h, w


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def _read_pairs(directory: Path, require_background: bool) -> PairedDataset:
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    pairs = []
    for sharp_path in sorted(directory.glob("*_sharp.pgm")):
        stem = sharp_path.name[:-len("_sharp.pgm")]
        if stem == "calib":
            continue
        blurry_path = directory / f"{stem}_blurry.pgm"
        if not blurry_path.exists():
            raise DataError(f"{sharp_path.name} has no matching {blurry_path.name}")
        pairs.append((load_image(sharp_path), load_image(blurry_path)))
    if not pairs:
        raise UsageError(f"no *_sharp.pgm/*_blurry.pgm pairs in {directory}")
    calib = None
    cs, cb = directory / "calib_sharp.pgm", directory / "calib_blurry.pgm"
    if cs.exists() and cb.exists():
        calib = (load_image(cs), load_image(cb))
    elif require_background:
        raise DataError("--require-background given but calib_sharp.pgm/calib_blurry.pgm missing")
    return PairedDataset(pairs, calibration=calib)


def cmd_estimate(args) -> int:
    data = _read_pairs(Path(args.pairs_dir), args.require_background)
    config = EstimationConfig(
        kernel_side=args.kernel_side, Q=args.q, learn_center=args.learn_center,
        learning_rate=args.lr, coeff_learning_rate=args.coeff_lr,
        center_learning_rate=args.center_lr, iterations=args.iterations,
        batch_size=args.batch_size, seed=args.seed, kernel_init=args.kernel_init,
        nonnegative_kernel=args.nonnegative, boundary=args.boundary,
        final_lr_fraction=args.final_lr_fraction, level=args.level)
    model, trace = estimate(data, config)
    save_model(model, args.out_model)
    loss_path = args.loss_csv or str(Path(args.out_model).with_suffix(".loss.csv"))
    write_loss_trace(trace, loss_path)
    print(f"final_loss={trace[-1]!r}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = load_model(args.model)
    out = apply(model, load_image(args.input))
    if args.noise is not None:
        variance = model.noise_variance if args.noise < 0 else args.noise
        out = add_noise(out, NoiseSpec(variance, args.seed))
    save_image(out, args.output, bits=args.bits)
    return EXIT_OK


def cmd_synth(args) -> int:
    model = load_model(args.model)
    dims = args.dims or model.shape
    if dims is None:
        raise UsageError("model has no backgrounds; pass --dims HxW")
    if args.sanity > 0 and not args.corpus:
        raise UsageError("--sanity needs --corpus")
    spec = TextSpec(min_len=args.min_len, max_len=args.max_len, lines=args.lines,
                    glyph_height=args.glyph_height, font=args.font)
    config = StreamConfig(model, spec, args.corpus or (), (args.hdc, args.sanity), args.seed,
                          dims, noisy=not args.clean)
    root = write_dataset(stream(config), args.out_dir, args.level if args.level is not None
                         else model.level, bits=args.bits)
    print(root)
    return EXIT_OK


def cmd_deblur(args) -> int:
    registry = load_registry(args.registry)
    out = deblur(registry, load_image(args.input), args.level)
    save_image(out, args.output, bits=args.bits)
    return EXIT_OK


def _read_scoring_set(directory: Path, level: int):
    if (directory / f"level_{level}").is_dir():
        directory = directory / f"level_{level}"
    samples = []
    for txt in sorted(directory.glob("*.txt"), key=lambda p: (len(p.stem), p.stem)):
        blurry = directory / f"{txt.stem}_blurry.pgm"
        if not blurry.exists():
            raise DataError(f"{txt.name} has no matching {blurry.name}")
        text = txt.read_text(encoding="utf-8")
        samples.append((load_image(blurry), text[:-1] if text.endswith("\n") else text))
    if not samples:
        raise DataError(f"no ground-truth .txt files in {directory}")
    return samples


def cmd_score(args) -> int:
    command = args.ocr_cmd or os.environ.get(OCR_ENV_VAR)
    if not command:
        raise NoRecognizerError(f"no recognizer: pass --ocr-cmd or set {OCR_ENV_VAR}")
    registry = load_registry(args.registry)
    samples = _read_scoring_set(Path(args.dataset), args.level)
    report = evaluate_level(samples, registry, args.level, command, threads=args.threads,
                            collapse=args.collapse_whitespace)
    out = args.out or str(Path(args.dataset) / f"score_level_{args.level}.csv")
    report.write_csv(out)
    failed = sum(s.failed for s in report.per_sample)
    if failed:
        log.warning("%d of %d samples failed and scored 0", failed, len(report.per_sample))
    print(report.summary())
    return EXIT_OK


def stretch_residual(r: np.ndarray, floor: float = 1.0 / 255) -> np.ndarray:
    """Map ``[-R, R]`` linearly onto ``[0, 1]`` with ``R = max(max|r|, floor)``.

    Zero maps to 0.5. The floor (one 8-bit gray level by default) keeps
    quantization-level residuals of a well-fitting model from being blown up
    to full contrast.
    """
    peak = max(float(np.max(np.abs(r))), floor)
    if peak == 0:
        return np.full(r.shape, 0.5)
    return 0.5 + 0.5 * r / peak


def cmd_diag(args) -> int:
    model = load_model(args.model)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m, n = args.size or model.shape or (256, 256)
    board = render_chessboard(m, n)
    distorted = warp_image(board, CoordMap.forward(model.distortion), Boundary.REFLEXIVE)
    undistorted = warp_image(distorted, CoordMap.undistort(model.distortion), Boundary.REFLEXIVE)
    save_image(distorted, out_dir / "chess_distorted.pgm")
    save_image(undistorted, out_dir / "chess_undistorted.pgm")
    if args.pair:
        sharp, blurry = (load_image(p) for p in args.pair)
        r, rmse = residual(model, sharp, blurry)
        save_image(stretch_residual(r), out_dir / "residual.pgm", bits=16)
        print(f"residual_rmse={rmse!r}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.kind == "recovery":
        if not args.case:
            raise UsageError("bench recovery needs --case FILE")
        report = bench.run_recovery_bench(bench.load_case(args.case))
        print(report.summary())
        return EXIT_OK
    rows = bench.run_perf_bench(repeats=args.repeats, seed=args.seed)
    if args.csv:
        bench.write_perf_csv(rows, args.csv)
    for row in rows:
        print(",".join(str(row[k]) for k in bench.PERF_FIELDS))
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hdcblur", description="Forward-model estimation and deblurring toolkit.")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help=f"seed for every random draw (default {DEFAULT_SEED})")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="cap on parallel workers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="fit kernel and distortion to image pairs")
    e.add_argument("pairs_dir")
    e.add_argument("out_model")
    e.add_argument("--loss-csv")
    e.add_argument("--kernel-side", type=int, default=701)
    e.add_argument("--q", type=int, default=2, help="distortion order; 0 disables distortion")
    e.add_argument("--iterations", type=int, default=1000)
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--lr", type=float, default=1e-3)
    e.add_argument("--coeff-lr", type=float, default=1e-4)
    e.add_argument("--center-lr", type=float, default=1e-4)
    e.add_argument("--final-lr-fraction", type=float, default=1.0)
    e.add_argument("--learn-center", action="store_true")
    e.add_argument("--kernel-init", choices=("gaussian", "delta"), default="gaussian")
    e.add_argument("--nonnegative", action="store_true")
    e.add_argument("--boundary", default="reflexive")
    e.add_argument("--level", type=int, default=0)
    e.add_argument("--require-background", action="store_true")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="apply a model to an image")
    s.add_argument("model")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--noise", type=float, nargs="?", const=-1.0, default=None,
                   help="add noise (model variance, or the given one)")
    s.add_argument("--bits", type=int, choices=(8, 16), default=16)
    s.set_defaults(func=cmd_simulate)

    y = sub.add_parser("synth", help="generate a synthetic training set")
    y.add_argument("model")
    y.add_argument("out_dir")
    y.add_argument("--hdc", type=int, default=20)
    y.add_argument("--sanity", type=int, default=1)
    y.add_argument("--corpus")
    y.add_argument("--dims", type=_dims)
    y.add_argument("--level", type=int)
    y.add_argument("--lines", type=int, default=2)
    y.add_argument("--min-len", type=int, default=8)
    y.add_argument("--max-len", type=int, default=16)
    y.add_argument("--glyph-height", type=int, default=14)
    y.add_argument("--font", default="builtin", help="'builtin' or a glyph atlas directory")
    y.add_argument("--clean", action="store_true", help="skip noise")
    y.add_argument("--bits", type=int, choices=(8, 16), default=16)
    y.set_defaults(func=cmd_synth)

    d = sub.add_parser("deblur", help="run the per-level deblurring pipeline")
    d.add_argument("registry")
    d.add_argument("input")
    d.add_argument("level", type=int)
    d.add_argument("output")
    d.add_argument("--bits", type=int, choices=(8, 16), default=16)
    d.set_defaults(func=cmd_deblur)

    c = sub.add_parser("score", help="OCR-score a level's deblurred dataset")
    c.add_argument("dataset")
    c.add_argument("registry")
    c.add_argument("level", type=int)
    c.add_argument("--ocr-cmd", help=f"command template with {{in}}; falls back to ${OCR_ENV_VAR}")
    c.add_argument("--out", help="CSV report path")
    c.add_argument("--collapse-whitespace", action="store_true")
    c.set_defaults(func=cmd_score)

    g = sub.add_parser("diag", help="distortion and residual diagnostics")
    g.add_argument("model")
    g.add_argument("out_dir")
    g.add_argument("--pair", nargs=2, metavar=("SHARP", "BLURRY"))
    g.add_argument("--size", type=_dims)
    g.set_defaults(func=cmd_diag)

    b = sub.add_parser("bench", help="recovery or timing benchmarks")
    b.add_argument("kind", choices=("recovery", "perf"))
    b.add_argument("--case")
    b.add_argument("--csv")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except (UsageError, NoRecognizerError) as exc:
        print(f"hdcblur: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationDiverged, IllPosedError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"hdcblur: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UnknownLevelError as exc:
        print(f"hdcblur: {exc.args[0]}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ImageFormatError, OutOfModelError, ReconstructorError, RecognizerError,
            OSError, ValueError) as exc:
        print(f"hdcblur: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
