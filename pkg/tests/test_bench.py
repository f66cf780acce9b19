import csv
from pathlib import Path

import numpy as np
import pytest

from hdcblur.bench import (PERF_FIELDS, BenchCase, generate_pairs, load_case, parse_case,
                           run_perf_bench, run_recovery_bench, write_perf_csv)
from hdcblur.convolution import gaussian_kernel

CASES = Path(__file__).resolve().parent.parent / "scripts" / "cases"


def test_parse_case():
    case = parse_case("# comment\nname=x\nheight=64  # trailing\ncoeffs=0.1, -0.2\ncompare_q=2\n"
                      "noise_variance=0.001\nboundary=periodic\n")
    assert (case.name, case.height, case.coeffs, case.compare_q) == ("x", 64, (0.1, -0.2), 2)
    assert case.noise_variance == 0.001 and case.boundary == "periodic"
    assert parse_case("compare_q=none").compare_q is None
    with pytest.raises(ValueError):
        parse_case("colour=blue")
    with pytest.raises(ValueError):
        parse_case("height 64")


def test_shipped_cases_parse():
    noiseless = load_case(CASES / "recovery_noiseless.case")
    noisy = load_case(CASES / "recovery_noisy.case")
    mis = load_case(CASES / "misspecified.case")
    assert (noiseless.max_kernel_error, noisy.max_kernel_error) == (0.05, 0.10)
    assert noiseless.coeffs == noisy.coeffs == (0.02, -0.005)
    assert noisy.noise_variance == 0.001 and noiseless.noise_variance == 0.0
    assert (mis.fit_q, mis.compare_q) == (0, 2)
    for case in (noiseless, noisy, mis):
        assert (case.height, case.width, case.pairs, case.kernel_side) == (128, 128, 50, 7)


def test_generated_pairs_are_deterministic():
    case = BenchCase(height=32, width=48, pairs=3, text_lines=3)
    a, b = generate_pairs(case), generate_pairs(case)
    for (xa, ya), (xb, yb) in zip(a.pairs, b.pairs):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    assert a.shape == (32, 48)


def test_small_recovery_report():
    case = BenchCase(name="tiny", height=48, width=48, kernel_side=3, kernel_sigma=0.7, pairs=6,
                     iterations=400, lr=2e-2, coeff_lr=2e-2, text_lines=5)
    report = run_recovery_bench(case)
    assert len(report.coeff_errors) == 2 and report.final_loss < report.initial_loss
    assert report.kernel_error < 0.05 and max(report.coeff_errors) < 0.10 and report.passed
    assert report.summary().startswith("tiny: kernel_err=")


def test_perf_csv_schema(tmp_path):
    rows = run_perf_bench(dims=(32,), kernel_sizes=(3, 9, 101), repeats=1)
    assert [r["kernel_side"] for r in rows] == [3, 9]
    write_perf_csv(rows, tmp_path / "p.csv")
    with open(tmp_path / "p.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == PERF_FIELDS
        assert len(list(reader)) == 2


def test_fft_beats_direct_for_large_kernels():
    rows = run_perf_bench(dims=(512,), kernel_sizes=(31, 63), repeats=3)
    assert all(r["fft_faster"] == 1 for r in rows), rows
