import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_instance
from hdcblur.convolution import gaussian_kernel
from hdcblur.distortion import DistortionParams
from hdcblur.estimation import (Adam, EstimationConfig, EstimationDiverged, PairedDataset, estimate,
                                gradients, initial_kernel, loss, remove_background, write_loss_trace)
from hdcblur.forward import ForwardModel, apply
from hdcblur.image import Boundary


def _reflect(i, size):
    i %= 2 * size
    return i if i < size else 2 * size - 1 - i


def loop_loss(kernel, coeffs, x, y):
    """Pixel-by-pixel evaluation with plain Python arithmetic (reflexive boundary)."""
    m, n = len(x), len(x[0])
    s = len(kernel)
    c = s // 2
    z = [[sum(kernel[c + a][c + b] * x[_reflect(i + a, m)][_reflect(j + b, n)]
              for a in range(-c, c + 1) for b in range(-c, c + 1)) for j in range(n)] for i in range(m)]
    total = 0.0
    half = n / 2
    for i in range(m):
        for j in range(n):
            px, py = (j + 0.5 - half) / half, (i + 0.5 - m / 2) / half
            r2 = px * px + py * py
            f = 1 + sum(k * r2 ** (q + 1) for q, k in enumerate(coeffs))
            col = f * px * half + half - 0.5
            row = f * py * half + m / 2 - 0.5
            r0, c0 = math.floor(row), math.floor(col)
            fr, fc = row - r0, col - c0
            val = 0.0
            for dr, wr in ((0, 1 - fr), (1, fr)):
                for dc, wc in ((0, 1 - fc), (1, fc)):
                    val += wr * wc * z[_reflect(r0 + dr, m)][_reflect(c0 + dc, n)]
            total += (val - y[i][j]) ** 2
    return total


def test_loss_matches_loop_oracle(rng):
    x, y = rng.random((2, 9, 10))
    k = rng.standard_normal((3, 3))
    coeffs = (0.07, -0.03)
    expected = loop_loss(k.tolist(), coeffs, x.tolist(), y.tolist())
    assert loss(k, DistortionParams(coeffs), [(x, y)]) == pytest.approx(expected, abs=1e-10)


def test_loss_is_batch_mean(rng):
    pairs = [tuple(rng.random((2, 8, 8))) for _ in range(3)]
    k = rng.random((3, 3))
    p = DistortionParams((0.02, 0.0))
    assert loss(k, p, pairs) == pytest.approx(np.mean([loss(k, p, [pr]) for pr in pairs]))


def test_loss_zero_at_truth(rng):
    k = gaussian_kernel(5, 1.0)
    p = DistortionParams((0.03, -0.01))
    model = ForwardModel(kernel=k, distortion=p)
    pairs = [(x, apply(model, x)) for x in rng.random((3, 16, 16))]
    assert loss(k, p, pairs) <= 1e-12
    g = gradients(k, p, pairs, center=True)
    assert np.max(np.abs(g.kernel)) <= 1e-8
    assert np.max(np.abs(g.coeffs)) <= 1e-8 and np.max(np.abs(g.center)) <= 1e-8
    assert loss(np.zeros((3, 3)), DistortionParams(), [(x, np.zeros_like(x)) for x, _ in pairs]) == 0.0


@settings(max_examples=8)
@given(st.integers(0, 2**32 - 1))
def test_gradients_match_finite_differences(seed):
    ok, checked, excluded = check_instance(seed)
    assert checked + excluded == 29
    assert ok == checked


def test_kernel_gradient_closed_form_3x3(rng):
    x, y = rng.random((2, 7, 8))
    k = rng.standard_normal((3, 3))
    g = gradients(k, None, [(x, y)], Boundary.ZERO)
    z = np.zeros_like(x)
    xp = np.pad(x, 1)
    for i in range(7):
        for j in range(8):
            z[i, j] = sum(k[a, b] * xp[i + a, j + b] for a in range(3) for b in range(3))
    r = z - y
    expected = np.array([[2 * sum(r[i, j] * xp[i + a, j + b] for i in range(7) for j in range(8))
                          for b in range(3)] for a in range(3)])
    assert np.allclose(g.kernel, expected, atol=1e-12)
    assert g.coeffs.shape == (0,) and g.center is None


def test_remove_background(rng):
    x0, y0, xb = rng.random((3, 10, 10))
    kx = rng.random((10, 10))
    data = PairedDataset([(x0, y0), (xb + x0, kx + y0)], calibration=(x0, y0))
    out = remove_background(data)
    assert not out.pairs[0][0].any() and not out.pairs[0][1].any()
    assert np.allclose(out.pairs[1][0], xb) and np.allclose(out.pairs[1][1], kx)
    zero = PairedDataset([(xb, kx)], calibration=(np.zeros((10, 10)), np.zeros((10, 10))))
    assert np.array_equal(remove_background(zero).pairs[0][0], xb)
    with pytest.raises(ValueError):
        remove_background(PairedDataset([(xb, kx)]))


def test_dataset_validation(rng):
    with pytest.raises(ValueError):
        PairedDataset([])
    with pytest.raises(ValueError):
        PairedDataset([(np.zeros((4, 4)), np.zeros((4, 5)))])
    with pytest.raises(ValueError):
        PairedDataset([(np.zeros((4, 4)), np.zeros((4, 4)))], calibration=(np.zeros((3, 3)),) * 2)


def test_config_validation():
    for bad in (dict(kernel_side=4), dict(Q=-1), dict(learning_rate=0), dict(iterations=0),
                dict(batch_size=0), dict(kernel_init="box"), dict(final_lr_fraction=0)):
        with pytest.raises(ValueError):
            EstimationConfig(**bad)


def test_initial_kernel():
    k = initial_kernel(EstimationConfig(kernel_side=17))
    assert k.sum() == pytest.approx(1.0) and k[8, 8] == k.max()
    d = initial_kernel(EstimationConfig(kernel_side=5, kernel_init="delta"))
    assert d[2, 2] == 1.0 and d.sum() == 1.0


def test_adam_first_step_is_lr_sized():
    params = {"w": np.array([1.0, -2.0])}
    Adam().step(params, {"w": np.array([3.0, -0.5])}, {"w": 0.1})
    assert np.allclose(params["w"], [0.9, -1.9], atol=1e-6)


def _pairs(rng, count, size, model):
    return [(x, apply(model, x)) for x in rng.random((count, size, size))]


def test_estimate_reduces_loss_and_attaches_backgrounds(rng):
    truth = ForwardModel(kernel=gaussian_kernel(5, 1.0), distortion=DistortionParams((0.03, 0.0)))
    pairs = _pairs(rng, 6, 24, truth)
    x0 = np.full((24, 24), 0.1)
    y0 = apply(truth, x0)
    data = PairedDataset([(x + x0, y + y0) for x, y in pairs], calibration=(x0, y0))
    config = EstimationConfig(kernel_side=5, iterations=150, batch_size=3, learning_rate=5e-3,
                              coeff_learning_rate=1e-3, level=4)
    seen = []
    model, trace = estimate(data, config, callback=lambda it, v: seen.append(it))
    assert len(trace) == 150 and seen == list(range(150))
    assert np.mean(trace[-10:]) < 0.05 * np.mean(trace[:10])
    assert model.level == 4 and model.distortion.order == 2
    assert np.array_equal(model.sharp_background, x0) and np.array_equal(model.blurred_background, y0)


def test_estimate_without_distortion(rng):
    data = PairedDataset(_pairs(rng, 4, 16, ForwardModel(kernel=gaussian_kernel(3, 0.7))))
    model, _ = estimate(data, EstimationConfig(kernel_side=3, Q=0, iterations=5))
    assert model.distortion.is_identity


def test_estimate_deterministic(rng):
    data = PairedDataset(_pairs(rng, 5, 16, ForwardModel(kernel=gaussian_kernel(3, 0.7),
                                                          distortion=DistortionParams((0.02, 0.0)))))
    config = EstimationConfig(kernel_side=3, iterations=30, batch_size=2, seed=11)
    (m1, t1), (m2, t2) = estimate(data, config), estimate(data, config)
    assert np.array(t1).tobytes() == np.array(t2).tobytes()
    assert m1.kernel.tobytes() == m2.kernel.tobytes()


def test_shift_consistency(rng):
    truth = ForwardModel(kernel=rng.random((5, 5)) / 12, boundary=Boundary.PERIODIC)
    pairs = _pairs(rng, 4, 20, truth)
    shifted = [(np.roll(x, (3, -5), (0, 1)), np.roll(y, (3, -5), (0, 1))) for x, y in pairs]
    config = EstimationConfig(kernel_side=5, Q=0, iterations=60, batch_size=2,
                              boundary=Boundary.PERIODIC)
    a, _ = estimate(PairedDataset(pairs), config)
    b, _ = estimate(PairedDataset(shifted), config)
    assert np.max(np.abs(a.kernel - b.kernel)) <= 1e-6


def test_nonnegative_projection(rng):
    data = PairedDataset(_pairs(rng, 3, 16, ForwardModel(kernel=gaussian_kernel(3, 0.7))))
    model, _ = estimate(data, EstimationConfig(kernel_side=5, Q=0, iterations=20, learning_rate=0.05,
                                               kernel_init="delta", nonnegative_kernel=True))
    assert model.kernel.min() >= 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_trace(rng):
    data = PairedDataset(_pairs(rng, 2, 16, ForwardModel()))
    data.pairs[0] = (data.pairs[0][0] * 1e200, data.pairs[0][1])
    with pytest.raises(EstimationDiverged) as info:
        estimate(data, EstimationConfig(kernel_side=3, Q=0, iterations=5, batch_size=2))
    assert len(info.value.trace) >= 1


def test_loss_trace_csv(tmp_path):
    write_loss_trace([3.0, 2.5, 0.125], tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["iteration", "loss"], ["0", "3.0"], ["1", "2.5"], ["2", "0.125"]]
