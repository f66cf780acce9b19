"""Composite blur operator: background removal, convolution, radial distortion.

``apply`` evaluates

    y = d[K](k * (x - x_bg)) + y_bg

where ``x_bg``/``y_bg`` are the (optional) sharp and blurred backgrounds taken
from a point calibration target. ``add_noise`` draws the amplitude-dependent
perturbation ``y = y~ (1 + eta)`` with ``eta ~ N(0, variance)`` per pixel.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .convolution import check_kernel, convolve, delta_kernel, read_kernel_stream, write_kernel_stream
from .distortion import CoordMap, DistortionParams, read_params_stream, warp_image, write_params_stream
from .image import Boundary, encode_pgm, read_pgm

MODEL_MAGIC = b"FMD1"
RNG_TAG = b"RNG1"
# Bit generator behind every random draw in the package; recorded in model files.
RNG_ALGORITHM = "numpy.PCG64"
DEFAULT_NOISE_VARIANCE = 0.001
NUM_LEVELS = 20


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; ``seed`` may be an int or a ``SeedSequence``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    """Split ``seed`` into ``count`` independent child seeds."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(count)


@dataclass(frozen=True)
class NoiseSpec:
    variance: float = DEFAULT_NOISE_VARIANCE
    seed: object = 0

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError("noise variance must be nonnegative")


@dataclass(frozen=True, eq=False)
class ForwardModel:
    kernel: np.ndarray = field(default_factory=delta_kernel)
    distortion: DistortionParams = field(default_factory=DistortionParams)
    sharp_background: Optional[np.ndarray] = None
    blurred_background: Optional[np.ndarray] = None
    noise_variance: float = DEFAULT_NOISE_VARIANCE
    boundary: Boundary = Boundary.REFLEXIVE
    level: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel", check_kernel(self.kernel))
        object.__setattr__(self, "boundary", Boundary.parse(self.boundary))
        if not self.noise_variance >= 0:
            raise ValueError("noise variance must be nonnegative")
        if not 0 <= self.level < NUM_LEVELS:
            raise ValueError(f"level must lie in [0, {NUM_LEVELS - 1}], got {self.level}")
        bgs = [b for b in (self.sharp_background, self.blurred_background) if b is not None]
        if len(bgs) == 2 and bgs[0].shape != bgs[1].shape:
            raise ValueError("sharp and blurred backgrounds differ in shape")

    @property
    def shape(self) -> Optional[tuple[int, int]]:
        """Working image dimensions implied by the backgrounds, if any."""
        for bg in (self.sharp_background, self.blurred_background):
            if bg is not None:
                return bg.shape
        return None

    def with_(self, **changes) -> "ForwardModel":
        return replace(self, **changes)


def _check_shape(model: ForwardModel, image: np.ndarray) -> None:
    shape = model.shape
    if shape is not None and image.shape != shape:
        raise ValueError(f"image shape {image.shape} does not match model backgrounds {shape}")


def apply(model: ForwardModel, sharp: np.ndarray) -> np.ndarray:
    """Noise-free blurred image for ``sharp``."""
    sharp = np.asarray(sharp, dtype=np.float64)
    _check_shape(model, sharp)
    x = sharp if model.sharp_background is None else sharp - model.sharp_background
    y = convolve(x, model.kernel, model.boundary)
    if not model.distortion.is_identity:
        y = warp_image(y, CoordMap.forward(model.distortion), model.boundary)
    if model.blurred_background is not None:
        y = y + model.blurred_background
    return y


def add_noise(blurry: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    blurry = np.asarray(blurry, dtype=np.float64)
    if spec.variance == 0:
        return blurry.copy()
    eta = make_rng(spec.seed).normal(0.0, np.sqrt(spec.variance), size=blurry.shape)
    return blurry * (1.0 + eta)


def residual(model: ForwardModel, sharp: np.ndarray, observed: np.ndarray):
    """Return ``(observed - apply(model, sharp), rmse)``."""
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != np.shape(sharp):
        raise ValueError(f"shape mismatch {np.shape(sharp)} vs {observed.shape}")
    r = observed - apply(model, sharp)
    return r, float(np.sqrt(np.mean(r * r)))


# ----------------------------------------------------------------------------
# FMD1 model files
# ----------------------------------------------------------------------------

def model_to_bytes(model: ForwardModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<IId", model.level, int(model.boundary), model.noise_variance))
    write_params_stream(model.distortion, buf)
    write_kernel_stream(model.kernel, buf)
    for bg in (model.sharp_background, model.blurred_background):
        if bg is None:
            buf.write(b"\x00")
        else:
            buf.write(b"\x01")
            buf.write(encode_pgm(bg, bits=16))
    name = RNG_ALGORITHM.encode("ascii")
    buf.write(RNG_TAG + struct.pack("<I", len(name)) + name)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> ForwardModel:
    buf = io.BytesIO(data)
    if buf.read(4) != MODEL_MAGIC:
        raise ValueError("not an FMD1 model file")
    head = buf.read(16)
    if len(head) != 16:
        raise ValueError("truncated model header")
    level, boundary, variance = struct.unpack("<IId", head)
    params = read_params_stream(buf)
    kernel = read_kernel_stream(buf)
    backgrounds = []
    for _ in range(2):
        flag = buf.read(1)
        if flag == b"\x01":
            img, _ = read_pgm(buf)
            backgrounds.append(img)
        elif flag == b"\x00":
            backgrounds.append(None)
        else:
            raise ValueError("bad background flag in model file")
    tag = buf.read(4)
    if tag and tag != RNG_TAG:
        raise ValueError("unexpected trailing data in model file")
    return ForwardModel(kernel=kernel, distortion=params, sharp_background=backgrounds[0],
                        blurred_background=backgrounds[1], noise_variance=variance,
                        boundary=Boundary(boundary), level=level)


def save_model(model: ForwardModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str | os.PathLike) -> ForwardModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
