"""Deblurring pipeline: undo the radial distortion, then deconvolve.

Three reconstructors can fill the deconvolution slot:

* ``Tikhonov`` -- closed-form spectral filter for
  ``1/2 |Bx - y|^2 + lam/2 |x|^2`` under periodic continuation;
* ``TV`` -- anisotropic total variation ``1/2 |Bx - y|^2 + lam |Wx|_1``
  solved by monotone FISTA with a dual inner prox;
* ``External`` -- any command reading and writing PGM files, so a trained
  network can be plugged in without this package depending on it.
"""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .convolution import bccb_spectrum, check_kernel
from .distortion import CoordMap, DistortionParams, warp_image
from .forward import ForwardModel, load_model
from .image import Boundary, load_image, pad, save_image

log = logging.getLogger(__name__)


class IllPosedError(ValueError):
    """Unregularized inversion of an operator with (numerically) zero eigenvalues."""


class ReconstructorError(RuntimeError):
    pass


class UnknownLevelError(KeyError):
    pass


@dataclass(frozen=True)
class Tikhonov:
    lam: float
    reflexive_pad: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class TV:
    lam: float
    iterations: int = 100
    step: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.step > 0:
            raise ValueError("step must be positive")


@dataclass(frozen=True)
class External:
    command: str

    def __post_init__(self):
        if not self.command.strip():
            raise ValueError("external reconstructor needs a command")


Reconstructor = Union[Tikhonov, TV, External]


# ----------------------------------------------------------------------------
# Stages
# ----------------------------------------------------------------------------

def undistort_preprocess(blurry: np.ndarray, params: DistortionParams,
                         boundary: Boundary = Boundary.REFLEXIVE) -> np.ndarray:
    """Resample ``blurry`` through the division-model correction."""
    return warp_image(blurry, CoordMap.undistort(params), boundary)


def tikhonov_deconvolve(blurry: np.ndarray, kernel: np.ndarray, lam: float,
                        reflexive_pad: bool = True) -> np.ndarray:
    """Spectral Tikhonov filter ``conj(H) Y / (|H|^2 + lam)``.

    With ``reflexive_pad`` the image is first extended by ``s // 2`` pixels of
    mirror continuation and the solution cropped back, which suppresses
    wrap-around ringing. Without it the result is the exact minimizer under
    periodic continuation.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    k = check_kernel(kernel)
    y = np.asarray(blurry, dtype=np.float64)
    c = k.shape[0] // 2
    if reflexive_pad:
        y = pad(y, c, Boundary.REFLEXIVE)
    H = bccb_spectrum(k, *y.shape)
    power = np.abs(H) ** 2
    if lam == 0 and np.min(np.abs(H)) < 1e-12:
        raise IllPosedError("operator has vanishing eigenvalues; use lambda > 0")
    x = np.fft.ifft2(np.conj(H) * np.fft.fft2(y) / (power + lam)).real
    if reflexive_pad and c:
        x = x[c:-c, c:-c]
    return x


def _grad(x: np.ndarray):
    """Forward differences, zero across the last row/column (mirror continuation)."""
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def _grad_adjoint(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def tv_seminorm(x: np.ndarray) -> float:
    gx, gy = _grad(x)
    return float(np.abs(gx).sum() + np.abs(gy).sum())


def tv_objective(x, y, spectrum, lam) -> float:
    r = np.fft.ifft2(spectrum * np.fft.fft2(x)).real - y
    return 0.5 * float(np.sum(r * r)) + lam * tv_seminorm(x)


def tv_step_bound(kernel: np.ndarray, shape: tuple[int, int], lam: float) -> float:
    """``1 / L`` with ``L = max|H|^2 + 8 lam`` bounding ``|[B; sqrt(lam) W]|^2``."""
    H = bccb_spectrum(kernel, *shape)
    return 1.0 / (float(np.max(np.abs(H) ** 2)) + 8.0 * lam)


def _tv_prox(v, alpha, dual, inner):
    """Anisotropic TV denoising of ``v`` with weight ``alpha`` (fast dual projection)."""
    px, py = dual
    qx, qy = px.copy(), py.copy()
    t = 1.0
    for _ in range(inner):
        gx, gy = _grad(v - alpha * _grad_adjoint(qx, qy))
        nx = np.clip(qx + gx / (8.0 * alpha), -1.0, 1.0)
        ny = np.clip(qy + gy / (8.0 * alpha), -1.0, 1.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        qx = nx + ((t - 1.0) / t_next) * (nx - px)
        qy = ny + ((t - 1.0) / t_next) * (ny - py)
        px, py, t = nx, ny, t_next
    return v - alpha * _grad_adjoint(px, py), (px, py)


def tv_deconvolve(blurry: np.ndarray, kernel: np.ndarray, lam: float, iterations: int = 100,
                  step: float = 1.0, inner: int = 20, return_trace: bool = False):
    """Anisotropic TV deconvolution under periodic continuation.

    Monotone FISTA: every iterate is accepted only if it does not increase
    the objective, so the recorded objective values are nonincreasing.
    ``step`` should not exceed :func:`tv_step_bound`.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if iterations < 1 or step <= 0:
        raise ValueError("need iterations >= 1 and step > 0")
    k = check_kernel(kernel)
    y = np.asarray(blurry, dtype=np.float64)
    H = bccb_spectrum(k, *y.shape)
    Hc = np.conj(H)
    Y = np.fft.fft2(y)
    x = y.copy()
    z = x.copy()
    f_x = tv_objective(x, y, H, lam)
    trace = [f_x]
    t = 1.0
    dual = (np.zeros_like(y), np.zeros_like(y))
    alpha = step * lam
    for it in range(iterations):
        Z = np.fft.fft2(z)
        grad = np.fft.ifft2(Hc * (H * Z - Y)).real
        v = z - step * grad
        if alpha > 0:
            u, dual = _tv_prox(v, alpha, dual, inner)
        else:
            u = v
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"non-finite TV iterate at step {it}")
        f_u = tv_objective(u, y, H, lam)
        x_prev = x
        if f_u <= f_x:
            x, f_x = u, f_u
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = x + (t / t_next) * (u - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        trace.append(f_x)
    if return_trace:
        return x, trace
    return x


_external_lock = threading.Lock()


def run_external(command: str, image: np.ndarray, level: int) -> np.ndarray:
    """Run an external reconstructor on ``image`` through 16-bit PGM files."""
    with _external_lock, tempfile.TemporaryDirectory(prefix="hdcblur-ext-") as tmp:
        src = Path(tmp) / "input.pgm"
        dst = Path(tmp) / "output.pgm"
        save_image(image, src, bits=16)
        argv = [tok.format(**{"in": str(src), "out": str(dst), "level": str(level)})
                for tok in shlex.split(command)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise ReconstructorError(
                f"external reconstructor exited with {proc.returncode}: {proc.stderr.strip()}")
        if not dst.exists():
            raise ReconstructorError("external reconstructor wrote no output")
        out = load_image(dst)
    if out.shape != image.shape:
        raise ReconstructorError(f"external output shape {out.shape} != input {image.shape}")
    return out


# ----------------------------------------------------------------------------
# Registry and dispatch
# ----------------------------------------------------------------------------

@dataclass
class PipelineRegistry:
    entries: dict[int, tuple[ForwardModel, Reconstructor]] = field(default_factory=dict)

    def register(self, level: int, model: ForwardModel, recon: Reconstructor) -> None:
        if model.level != level:
            raise ValueError(f"model is tagged level {model.level}, registered as {level}")
        if level in self.entries:
            raise ValueError(f"level {level} registered twice")
        self.entries[level] = (model, recon)

    @property
    def levels(self) -> list[int]:
        return sorted(self.entries)

    def __getitem__(self, level: int):
        try:
            return self.entries[level]
        except KeyError:
            raise UnknownLevelError(
                f"level {level} is not registered; known levels: {self.levels}") from None


def parse_reconstructor(spec: str) -> Reconstructor:
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "tikhonov":
        return Tikhonov(float(arg))
    if kind == "tv":
        parts = [p.strip() for p in arg.split(",")]
        if len(parts) != 3:
            raise ValueError(f"tv reconstructor needs lambda,iterations,step: {spec!r}")
        return TV(float(parts[0]), int(parts[1]), float(parts[2]))
    if kind == "external":
        return External(arg.strip())
    raise ValueError(f"unknown reconstructor {spec!r}")


def format_reconstructor(recon: Reconstructor) -> str:
    if isinstance(recon, Tikhonov):
        return f"tikhonov:{recon.lam!r}"
    if isinstance(recon, TV):
        return f"tv:{recon.lam!r},{recon.iterations},{recon.step!r}"
    return f"external:{recon.command}"


def parse_registry(text: str, base_dir: str | os.PathLike = ".") -> PipelineRegistry:
    """Parse ``level=<k> model=<path> recon=<spec>`` lines.

    ``recon=`` must come last; its value runs to the end of the line so that
    external commands may contain spaces. Relative model paths resolve
    against ``base_dir``.
    """
    registry = PipelineRegistry()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        head, sep, recon_spec = stripped.partition("recon=")
        if not sep:
            raise ValueError(f"line {lineno}: missing recon=")
        fields_ = dict(tok.split("=", 1) for tok in head.split() if "=" in tok)
        if "level" not in fields_ or "model" not in fields_:
            raise ValueError(f"line {lineno}: need level= and model=")
        level = int(fields_["level"])
        model_path = Path(fields_["model"])
        if not model_path.is_absolute():
            model_path = Path(base_dir) / model_path
        registry.register(level, load_model(model_path), parse_reconstructor(recon_spec))
    return registry


def load_registry(path: str | os.PathLike) -> PipelineRegistry:
    path = Path(path)
    return parse_registry(path.read_text(), base_dir=path.parent)


def deblur(registry: PipelineRegistry, blurry: np.ndarray, level: int) -> np.ndarray:
    """Undistort with the level's coefficients, then run its reconstructor.

    For the classical reconstructors a model's blurred background is removed
    (after undistortion) before deconvolution and the sharp background added
    back afterwards.
    """
    model, recon = registry[level]
    y = np.asarray(blurry, dtype=np.float64)
    pre = undistort_preprocess(y, model.distortion, model.boundary)
    if isinstance(recon, External):
        return run_external(recon.command, pre, level)
    if model.blurred_background is not None:
        pre = pre - undistort_preprocess(model.blurred_background, model.distortion, model.boundary)
    if isinstance(recon, Tikhonov):
        # a model whose blur is periodic is inverted exactly without padding
        padded = recon.reflexive_pad and model.boundary is not Boundary.PERIODIC
        out = tikhonov_deconvolve(pre, model.kernel, recon.lam, padded)
    else:
        out = tv_deconvolve(pre, model.kernel, recon.lam, recon.iterations, recon.step)
    if model.sharp_background is not None:
        out = out + model.sharp_background
    return out
