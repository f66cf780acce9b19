"""Desk-scale benchmarks: parameter recovery from synthetic pairs and convolution timings."""

from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .convolution import convolve_direct, convolve_fft, gaussian_kernel
from .distortion import DistortionParams
from .estimation import EstimationConfig, PairedDataset, estimate
from .forward import ForwardModel, residual
from .image import Boundary
from .synth import TextSpec, synth_hdc_pair


@dataclass
class BenchCase:
    name: str = "recovery"
    height: int = 128
    width: int = 128
    kernel_side: int = 7
    kernel_sigma: float = 1.2
    coeffs: tuple[float, ...] = (0.02, -0.005)
    noise_variance: float = 0.0
    pairs: int = 50
    boundary: str = "reflexive"
    text_lines: int = 13
    glyph_height: int = 7
    seed: int = 0
    # estimation settings
    fit_q: int = 2
    iterations: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    coeff_lr: float = 1e-3
    final_lr_fraction: float = 0.01
    # pass thresholds (relative errors, fractions not percent)
    max_kernel_error: float = 0.05
    max_coeff_error: float = 0.10
    # when set, a second fit with this many coefficients serves as the reference
    # whose residual rmse the main fit must strictly exceed
    compare_q: Optional[int] = None


def _convert(tp, raw: str):
    tp = str(tp)
    if tp.startswith("tuple"):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if tp.startswith("Optional[int]") or tp == "int | None":
        return None if raw.lower() in ("", "none") else int(raw)
    if tp == "int":
        return int(raw)
    if tp == "float":
        return float(raw)
    return raw


def parse_case(text: str) -> BenchCase:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(BenchCase)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(types[key], raw)
    return BenchCase(**values)


def load_case(path: str | os.PathLike) -> BenchCase:
    with open(path) as fh:
        return parse_case(fh.read())


def ground_truth_model(case: BenchCase) -> ForwardModel:
    return ForwardModel(kernel=gaussian_kernel(case.kernel_side, case.kernel_sigma),
                        distortion=DistortionParams(case.coeffs),
                        noise_variance=case.noise_variance, boundary=case.boundary)


def generate_pairs(case: BenchCase) -> PairedDataset:
    """Text pages covering the whole canvas, blurred by the ground-truth model."""
    model = ground_truth_model(case)
    dims = (case.height, case.width)
    scale = max(1, case.glyph_height // 7)
    per_line = (case.width + scale) // (6 * scale)
    spec = TextSpec(lines=case.text_lines, glyph_height=case.glyph_height,
                    min_len=per_line, max_len=per_line)
    seeds = np.random.SeedSequence(case.seed).spawn(case.pairs)
    pairs = []
    for ss in seeds:
        sharp, blurry, _ = synth_hdc_pair(model, spec, ss, dims, noisy=case.noise_variance > 0)
        pairs.append((sharp, blurry))
    return PairedDataset(pairs)


def _fit(case: BenchCase, data: PairedDataset, q: int):
    config = EstimationConfig(kernel_side=case.kernel_side, Q=q, iterations=case.iterations,
                              batch_size=case.batch_size, learning_rate=case.lr,
                              coeff_learning_rate=case.coeff_lr,
                              final_lr_fraction=case.final_lr_fraction, seed=case.seed,
                              boundary=case.boundary)
    return estimate(data, config)


def dataset_rmse(model: ForwardModel, data: PairedDataset) -> float:
    sq = [residual(model, x, y)[1] ** 2 for x, y in data.pairs]
    return float(np.sqrt(np.mean(sq)))


@dataclass
class RecoveryReport:
    name: str
    kernel_error: float
    coeff_errors: list[float]
    coeffs: list[float]
    rmse: float
    initial_loss: float
    final_loss: float
    seconds: float
    reference_rmse: Optional[float] = None
    trace: list[float] = field(default_factory=list, repr=False)
    passed: bool = False

    def summary(self) -> str:
        parts = [f"{self.name}: kernel_err={self.kernel_error:.4g}",
                 "coeff_err=" + ",".join(f"{e:.3g}" for e in self.coeff_errors),
                 f"rmse={self.rmse:.4g}"]
        if self.reference_rmse is not None:
            parts.append(f"reference_rmse={self.reference_rmse:.4g}")
        parts.append(f"time={self.seconds:.1f}s {'PASS' if self.passed else 'FAIL'}")
        return " ".join(parts)


def run_recovery_bench(case: BenchCase, data: Optional[PairedDataset] = None) -> RecoveryReport:
    """Generate data from a known model, fit it back and compare."""
    start = time.perf_counter()
    truth = ground_truth_model(case)
    data = data if data is not None else generate_pairs(case)
    model, trace = _fit(case, data, case.fit_q)
    k_true = truth.kernel
    kernel_error = float(np.linalg.norm(model.kernel - k_true) / np.linalg.norm(k_true))
    if case.fit_q > 0:
        coeff_errors = [abs(e - t) / abs(t) if t != 0 else abs(e)
                        for e, t in zip(model.distortion.coeffs, case.coeffs)]
    else:
        coeff_errors = []
    rmse = dataset_rmse(model, data)
    report = RecoveryReport(case.name, kernel_error, coeff_errors, list(model.distortion.coeffs),
                            rmse, trace[0], trace[-1], 0.0, trace=trace)
    if case.compare_q is not None:
        ref_case = BenchCase(**{**asdict(case), "fit_q": case.compare_q, "compare_q": None})
        ref_model, _ = _fit(ref_case, data, case.compare_q)
        report.reference_rmse = dataset_rmse(ref_model, data)
        report.passed = rmse > report.reference_rmse
    else:
        report.passed = kernel_error < case.max_kernel_error and all(
            e < case.max_coeff_error for e in coeff_errors)
    report.seconds = time.perf_counter() - start
    return report


# ----------------------------------------------------------------------------
# Timings
# ----------------------------------------------------------------------------

PERF_FIELDS = ["height", "width", "kernel_side", "direct_seconds", "fft_seconds", "fft_faster"]


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_perf_bench(dims: Sequence[int] = (64, 256, 512), kernel_sizes: Sequence[int] = (3, 15, 31, 63),
                   repeats: int = 3, seed: int = 0) -> list[dict]:
    """Median wall-clock time of periodic direct vs FFT convolution."""
    rng = np.random.default_rng(seed)
    rows = []
    for d in dims:
        image = rng.random((d, d))
        for s in kernel_sizes:
            if s > 2 * d:
                continue
            kernel = rng.random((s, s))
            direct = _median_time(lambda: convolve_direct(image, kernel, Boundary.PERIODIC), repeats)
            fft = _median_time(lambda: convolve_fft(image, kernel), repeats)
            rows.append(dict(height=d, width=d, kernel_side=s, direct_seconds=direct,
                             fft_seconds=fft, fft_faster=int(fft < direct)))
    return rows


def write_perf_csv(rows: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PERF_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
