#!/usr/bin/env python3
"""Chessboard and residual images showing how much a model distorts.

Without a model file, a synthetic one with the given coefficients is used.
Writes, for each coefficient setting, the distorted and division-model
corrected chessboards plus the contrast-stretched residual of a
distortion-free fit against the distorted observation.
"""

import argparse
from pathlib import Path

import numpy as np

from hdcblur.cli import stretch_residual
from hdcblur.convolution import gaussian_kernel
from hdcblur.distortion import CoordMap, DistortionParams, normalize_coords, render_chessboard, warp_image
from hdcblur.forward import ForwardModel, apply, load_model, residual
from hdcblur.image import save_image


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model", type=Path)
    parser.add_argument("--coeffs", type=float, nargs="+", default=[0.02, -0.005])
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--out", type=Path, default=Path("figures"))
    args = parser.parse_args()

    if args.model:
        model = load_model(args.model)
    else:
        model = ForwardModel(kernel=gaussian_kernel(7, 1.2), distortion=DistortionParams(tuple(args.coeffs)))
    args.out.mkdir(parents=True, exist_ok=True)
    m = n = args.size
    board = render_chessboard(m, n)
    distorted = warp_image(board, CoordMap.forward(model.distortion))
    corrected = warp_image(distorted, CoordMap.undistort(model.distortion))
    save_image(distorted, args.out / "chess_distorted.pgm")
    save_image(corrected, args.out / "chess_undistorted.pgm")

    ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    radius = np.hypot(*normalize_coords((m, n), ii, jj))
    err = np.abs(corrected - board)
    for lo, hi in [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0), (1.0, 1.5)]:
        sel = (radius >= lo) & (radius < hi)
        print(f"radius [{lo:.2f}, {hi:.2f}): mean |corrected - board| = {err[sel].mean():.4f}")

    if model.shape is None or model.shape == (m, n):
        sharp = board if model.shape is None else board * 0.8 + 0.1
        observed = apply(model, sharp)
        plain = model.with_(distortion=DistortionParams((0.0,) * model.distortion.order))
        r_full, rmse_full = residual(model, sharp, observed)
        r_plain, rmse_plain = residual(plain, sharp, observed)
        peak = max(np.abs(r_plain).max(), 1.0 / 255)
        save_image(stretch_residual(r_plain, peak), args.out / "residual_without_distortion.pgm", bits=16)
        save_image(stretch_residual(r_full, peak), args.out / "residual_with_distortion.pgm", bits=16)
        print(f"residual rmse: with distortion {rmse_full:.3e}, without {rmse_plain:.3e}")
    print(f"wrote {args.out}/")


if __name__ == "__main__":
    main()
