"""Fitting the blur kernel and radial distortion to paired sharp/blurry images.

The objective is the mean squared misfit

    L(k, K) = (1/N) sum_i || d[K](k * x_i) - y_i ||^2

minimized with Adam over mini-batches. Gradients are derived by hand: the
warp is linear in intensities, so the residual is pulled back through the
bilinear adjoint and correlated with the sharp image for the kernel, while
the distortion parameters enter only through the sampling coordinates.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .convolution import check_kernel, convolve, delta_kernel, gaussian_kernel, kernel_gradient
from .distortion import CoordMap, DistortionParams, WarpOperator, forward_jacobians
from .forward import ForwardModel, make_rng
from .image import Boundary

log = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]


class EstimationDiverged(RuntimeError):
    """The loss became non-finite; ``trace`` holds the values seen so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class PairedDataset:
    pairs: list[Pair]
    calibration: Optional[Pair] = None

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("dataset needs at least one pair")
        self.pairs = [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
                      for x, y in self.pairs]
        shape = self.pairs[0][0].shape
        images = [im for pair in self.pairs for im in pair]
        if self.calibration is not None:
            self.calibration = tuple(np.asarray(im, dtype=np.float64) for im in self.calibration)
            images.extend(self.calibration)
        for im in images:
            if im.shape != shape:
                raise ValueError(f"all images must share shape {shape}, got {im.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pairs[0][0].shape


@dataclass
class EstimationConfig:
    kernel_side: int = 701
    Q: int = 2
    learn_center: bool = False
    learning_rate: float = 1e-3
    coeff_learning_rate: float = 1e-4
    center_learning_rate: float = 1e-4
    iterations: int = 1000
    batch_size: int = 8
    seed: int = 0
    kernel_init: str = "gaussian"
    init_sigma: Optional[float] = None
    nonnegative_kernel: bool = False
    boundary: Boundary = Boundary.REFLEXIVE
    # learning rates follow a cosine decay down to this fraction of their start value
    final_lr_fraction: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    level: int = 0

    def __post_init__(self):
        if self.kernel_side < 1 or self.kernel_side % 2 != 1:
            raise ValueError("kernel_side must be a positive odd number")
        if self.Q < 0:
            raise ValueError("Q must be nonnegative (0 disables distortion)")
        if min(self.learning_rate, self.coeff_learning_rate, self.center_learning_rate) <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be at least 1")
        if self.kernel_init not in ("gaussian", "delta"):
            raise ValueError(f"unknown kernel_init {self.kernel_init!r}")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must lie in (0, 1]")
        self.boundary = Boundary.parse(self.boundary)


class Adam:
    """Adam with bias correction, one state slot per named parameter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Gradients(NamedTuple):
    kernel: np.ndarray
    coeffs: np.ndarray
    center: Optional[np.ndarray]


# ----------------------------------------------------------------------------
# Objective and gradients
# ----------------------------------------------------------------------------

def remove_background(dataset: PairedDataset) -> PairedDataset:
    """Subtract the calibration pair from every training pair."""
    if dataset.calibration is None:
        raise ValueError("background removal needs a calibration pair")
    x0, y0 = dataset.calibration
    return PairedDataset([(x - x0, y - y0) for x, y in dataset.pairs], calibration=None)


def _forward_batch(kernel, params, batch, boundary, need_grad, need_center):
    kernel = check_kernel(kernel)
    boundary = Boundary.parse(boundary)
    batch = list(batch)
    shape = batch[0][0].shape
    scale = 1.0 / len(batch)
    warp = None
    if params is not None:
        warp = WarpOperator(CoordMap.forward(params), shape, boundary)
    total = 0.0
    g_kernel = np.zeros_like(kernel)
    g_coeff = np.zeros(params.order if params is not None else 0)
    g_center = np.zeros(2) if need_center else None
    jac = None
    if need_grad and warp is not None:
        jac = forward_jacobians(params, shape)
    for x, y in batch:
        if x.shape != shape or y.shape != shape:
            raise ValueError("all images in a batch must share one shape")
        z = convolve(x, kernel, boundary)
        pred = warp.apply(z) if warp is not None else z
        r = pred - y
        total += float(np.sum(r * r))
        if not need_grad:
            continue
        g_pred = 2.0 * scale * r
        g_z = warp.adjoint(g_pred) if warp is not None else g_pred
        g_kernel += kernel_gradient(x, g_z, kernel.shape[0], boundary)
        if warp is not None:
            d_row, d_col = warp.coordinate_gradient(z)
            a_row, a_col = g_pred * d_row, g_pred * d_col
            d_coeff, d_center = jac
            g_coeff += np.einsum("qmn,mn->q", d_coeff[:, 0], a_row) \
                + np.einsum("qmn,mn->q", d_coeff[:, 1], a_col)
            if need_center:
                g_center += np.einsum("cmn,mn->c", d_center[:, 0], a_row) \
                    + np.einsum("cmn,mn->c", d_center[:, 1], a_col)
    return total * scale, Gradients(g_kernel, g_coeff, g_center)


def loss(kernel: np.ndarray, params: Optional[DistortionParams], batch: Sequence[Pair],
         boundary: Boundary = Boundary.REFLEXIVE) -> float:
    """Mean over the batch of the summed squared misfit.

    ``params=None`` evaluates the distortion-free model.
    """
    value, _ = _forward_batch(kernel, params, batch, boundary, False, False)
    return value


def gradients(kernel: np.ndarray, params: Optional[DistortionParams], batch: Sequence[Pair],
              boundary: Boundary = Boundary.REFLEXIVE, center: bool = False) -> Gradients:
    """Exact gradient of :func:`loss` (away from bilinear cell edges)."""
    _, grads = _forward_batch(kernel, params, batch, boundary, True, center)
    return grads


def loss_and_gradients(kernel, params, batch, boundary=Boundary.REFLEXIVE, center=False):
    return _forward_batch(kernel, params, batch, boundary, True, center)


# ----------------------------------------------------------------------------
# Driver
# ----------------------------------------------------------------------------

def initial_kernel(config: EstimationConfig) -> np.ndarray:
    s = config.kernel_side
    if config.kernel_init == "delta":
        return delta_kernel(s)
    sigma = config.init_sigma if config.init_sigma is not None else s / 8.0
    return gaussian_kernel(s, sigma)


def _batches(n_pairs: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffled at every epoch."""
    while True:
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch_size):
            yield order[start:start + batch_size]


def estimate(dataset: PairedDataset, config: EstimationConfig,
             callback: Optional[Callable[[int, float], None]] = None):
    """Fit a :class:`ForwardModel` to ``dataset``.

    Returns ``(model, loss_trace)`` where ``loss_trace[t]`` is the mini-batch
    loss evaluated before update ``t``. Background removal is applied when
    the dataset carries a calibration pair, and the pair is attached to the
    returned model as its backgrounds.
    """
    calibration = dataset.calibration
    work = remove_background(dataset) if calibration is not None else dataset
    rng = make_rng(config.seed)
    params = {"kernel": initial_kernel(config).copy()}
    if config.Q > 0:
        params["coeffs"] = np.zeros(config.Q)
        params["center"] = np.zeros(2)
    base_lrs = {"kernel": config.learning_rate, "coeffs": config.coeff_learning_rate,
                "center": config.center_learning_rate}
    adam = Adam(config.beta1, config.beta2, config.eps)
    trace: list[float] = []
    batches = _batches(len(work.pairs), config.batch_size, rng)
    for it in range(config.iterations):
        idx = next(batches)
        batch = [work.pairs[i] for i in idx]
        dparams = None
        if config.Q > 0:
            dparams = DistortionParams(tuple(params["coeffs"]), tuple(params["center"]))
        value, grads = loss_and_gradients(params["kernel"], dparams, batch, config.boundary,
                                          center=config.learn_center)
        trace.append(value)
        if not np.isfinite(value):
            raise EstimationDiverged(f"loss became non-finite at iteration {it}", trace)
        if callback is not None:
            callback(it, value)
        g = {"kernel": grads.kernel}
        if config.Q > 0:
            g["coeffs"] = grads.coeffs
            if config.learn_center:
                g["center"] = grads.center
        frac = config.final_lr_fraction
        if frac < 1.0 and config.iterations > 1:
            decay = frac + (1 - frac) * 0.5 * (1 + np.cos(np.pi * it / (config.iterations - 1)))
        else:
            decay = 1.0
        adam.step(params, g, {k: v * decay for k, v in base_lrs.items()})
        if config.nonnegative_kernel:
            np.maximum(params["kernel"], 0.0, out=params["kernel"])
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            raise EstimationDiverged(f"parameters became non-finite at iteration {it}", trace)
    if config.Q > 0:
        center = tuple(np.clip(params["center"], -1.0, 1.0))
        distortion = DistortionParams(tuple(params["coeffs"]), center)
    else:
        distortion = DistortionParams((0.0,))
    model = ForwardModel(
        kernel=params["kernel"], distortion=distortion,
        sharp_background=None if calibration is None else calibration[0],
        blurred_background=None if calibration is None else calibration[1],
        boundary=config.boundary, level=config.level)
    log.info("estimation finished: loss %.6g -> %.6g", trace[0], trace[-1])
    return model, trace


def write_loss_trace(trace: Sequence[float], path: str | os.PathLike) -> None:
    """CSV with one ``iteration,loss`` row per optimizer step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])
