"""Radial lens distortion and bilinear image warping.

Coordinates are normalized isotropically by the half-width of the image::

    x = (j + 0.5 - n/2) / (n/2),    y = (i + 0.5 - m/2) / (n/2)

so ``x`` spans ``[-1, 1]`` and one unit has the same pixel length on both
axes. The forward model is the even-order polynomial

    d(p) = c + (1 + sum_q K_q |p - c|^(2q)) (p - c)

and the correction uses the division model

    u(p~) = c + (p~ - c) / (1 + sum_q K_q |p~ - c|^(2q)),

which only approximates the inverse of ``d`` away from the center.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .image import Boundary, bilinear_stencil


class OutOfModelError(ValueError):
    """The division-model denominator is not positive at this coordinate."""


@dataclass(frozen=True)
class DistortionParams:
    coeffs: tuple[float, ...] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        coeffs = tuple(float(k) for k in np.atleast_1d(self.coeffs))
        center = tuple(float(v) for v in self.center)
        if len(coeffs) < 1:
            raise ValueError("at least one distortion coefficient is required")
        if len(center) != 2:
            raise ValueError("center must be a pair (x0, y0)")
        if not all(np.isfinite(coeffs)) or not all(np.isfinite(center)):
            raise ValueError("distortion parameters must be finite")
        if max(abs(center[0]), abs(center[1])) > 1.0:
            raise ValueError(f"center {center} outside the normalized square")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "center", center)

    @property
    def order(self) -> int:
        return len(self.coeffs)

    @property
    def is_identity(self) -> bool:
        return all(k == 0.0 for k in self.coeffs)

    def radial_factor(self, r2):
        """``1 + sum_q K_q r2^q`` evaluated by Horner's rule."""
        acc = np.zeros_like(np.asarray(r2, dtype=np.float64))
        for k in reversed(self.coeffs):
            acc = (acc + k) * r2
        return 1.0 + acc

    def radial_factor_slope(self, r2):
        """Derivative of :meth:`radial_factor` with respect to ``r2``."""
        acc = np.zeros_like(np.asarray(r2, dtype=np.float64))
        for q in range(self.order, 0, -1):
            acc = acc * r2 + q * self.coeffs[q - 1]
        return acc


# ----------------------------------------------------------------------------
# Coordinate maps
# ----------------------------------------------------------------------------

def normalize_coords(dims: tuple[int, int], i, j):
    m, n = dims
    half = n / 2.0
    x = (np.asarray(j, dtype=np.float64) + 0.5 - half) / half
    y = (np.asarray(i, dtype=np.float64) + 0.5 - m / 2.0) / half
    return x, y


def denormalize_coords(dims: tuple[int, int], x, y):
    """Inverse of :func:`normalize_coords`, returning continuous ``(row, col)``."""
    m, n = dims
    half = n / 2.0
    col = np.asarray(x) * half + half - 0.5
    row = np.asarray(y) * half + m / 2.0 - 0.5
    return row, col


def distort_coords(params: DistortionParams, p):
    x, y = p
    vx = np.asarray(x, dtype=np.float64) - params.center[0]
    vy = np.asarray(y, dtype=np.float64) - params.center[1]
    f = params.radial_factor(vx * vx + vy * vy)
    return params.center[0] + f * vx, params.center[1] + f * vy


def _undistort(params: DistortionParams, x, y):
    vx = np.asarray(x, dtype=np.float64) - params.center[0]
    vy = np.asarray(y, dtype=np.float64) - params.center[1]
    denom = params.radial_factor(vx * vx + vy * vy)
    valid = denom > 0
    safe = np.where(valid, denom, 1.0)
    return params.center[0] + vx / safe, params.center[1] + vy / safe, valid


def undistort_coords(params: DistortionParams, p):
    """Division-model correction; raises :class:`OutOfModelError` off-model."""
    ux, uy, valid = _undistort(params, *p)
    if not np.all(valid):
        raise OutOfModelError(f"nonpositive division-model denominator at {p}")
    if np.ndim(ux) == 0:
        return float(ux), float(uy)
    return ux, uy


@dataclass(frozen=True)
class CoordMap:
    """A normalized-coordinate map: ``d`` (forward) or ``u`` (inverse)."""

    params: DistortionParams = field(default_factory=DistortionParams)
    inverse: bool = False

    @classmethod
    def forward(cls, params: DistortionParams) -> "CoordMap":
        return cls(params, inverse=False)

    @classmethod
    def undistort(cls, params: DistortionParams) -> "CoordMap":
        return cls(params, inverse=True)

    def __call__(self, x, y):
        """Return ``(x~, y~, valid)``."""
        if self.inverse:
            return _undistort(self.params, x, y)
        dx, dy = distort_coords(self.params, (x, y))
        return dx, dy, np.ones(np.shape(dx), dtype=bool)


def source_coords(cmap: CoordMap, shape: tuple[int, int]):
    """Continuous source ``(row, col)`` sampled by each output pixel, plus validity."""
    m, n = shape
    ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    x, y = normalize_coords(shape, ii, jj)
    tx, ty, valid = cmap(x, y)
    rows, cols = denormalize_coords(shape, tx, ty)
    return rows, cols, valid


def _fill_value(image: np.ndarray, boundary: Boundary) -> float:
    if boundary is Boundary.ZERO:
        return 0.0
    border = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    return float(border.mean())


def warp_image(image: np.ndarray, cmap: CoordMap, boundary: Boundary = Boundary.REFLEXIVE,
               return_invalid: bool = False):
    """Resample ``image`` so output pixel ``p`` takes the value at ``cmap(p)``.

    Pixels whose coordinate falls outside the division model are filled with
    zero (zero padding) or the mean border intensity, and counted; pass
    ``return_invalid=True`` to get ``(image, count)``.
    """
    boundary = Boundary.parse(boundary)
    image = np.asarray(image, dtype=np.float64)
    rows, cols, valid = source_coords(cmap, image.shape)
    index, weight, *_ = bilinear_stencil(image.shape, rows, cols, boundary)
    out = np.sum(image.ravel()[index] * weight, axis=0)
    invalid = int(np.count_nonzero(~valid))
    if invalid:
        out[~valid] = _fill_value(image, boundary)
    if return_invalid:
        return out, invalid
    return out


class WarpOperator:
    """Precomputed bilinear warp as a linear map on images of one shape.

    Holds the stencil for ``cmap`` so forward application, its adjoint and
    the intensity gradient with respect to the sampling coordinates can be
    evaluated repeatedly. Off-model pixels map to zero here.
    """

    def __init__(self, cmap: CoordMap, shape: tuple[int, int],
                 boundary: Boundary = Boundary.REFLEXIVE):
        self.cmap = cmap
        self.shape = tuple(shape)
        self.boundary = Boundary.parse(boundary)
        self.rows, self.cols, self.valid = source_coords(cmap, self.shape)
        self.index, weight, self.frac_r, self.frac_c, inside = bilinear_stencil(
            self.shape, self.rows, self.cols, self.boundary)
        self.weight = weight * self.valid
        self._mask = inside & self.valid

    def apply(self, image: np.ndarray) -> np.ndarray:
        return np.sum(image.ravel()[self.index] * self.weight, axis=0)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        """Scatter ``values`` back onto the source grid (transpose of :meth:`apply`)."""
        contrib = self.weight * values[None]
        flat = np.bincount(self.index.ravel(), weights=contrib.ravel(),
                           minlength=self.shape[0] * self.shape[1])
        return flat.reshape(self.shape)

    def coordinate_gradient(self, image: np.ndarray):
        """Partial derivatives of the sampled intensity w.r.t. (row, col).

        The interpolant is piecewise bilinear, so these are one-sided inside
        each cell and undefined exactly on cell edges.
        """
        v = image.ravel()[self.index] * self._mask
        fr, fc = self.frac_r, self.frac_c
        d_row = (1 - fc) * (v[2] - v[0]) + fc * (v[3] - v[1])
        d_col = (1 - fr) * (v[1] - v[0]) + fr * (v[3] - v[2])
        return d_row * self.valid, d_col * self.valid


def forward_jacobians(params: DistortionParams, shape: tuple[int, int]):
    """Derivatives of the forward map's pixel coordinates w.r.t. its parameters.

    Returns ``(d_coeff, d_center)`` with ``d_coeff`` of shape ``(Q, 2, m, n)``
    and ``d_center`` of shape ``(2, 2, m, n)``; axis 1 indexes (row, col) and
    axis 0 of ``d_center`` indexes (x0, y0).
    """
    m, n = shape
    half = n / 2.0
    ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    x, y = normalize_coords(shape, ii, jj)
    vx = x - params.center[0]
    vy = y - params.center[1]
    r2 = vx * vx + vy * vy
    d_coeff = np.empty((params.order, 2, m, n))
    power = np.ones_like(r2)
    for q in range(params.order):
        power = power * r2
        d_coeff[q, 0] = half * power * vy
        d_coeff[q, 1] = half * power * vx
    f = params.radial_factor(r2)
    fp = params.radial_factor_slope(r2)
    # d(d)/dc = (1 - f) I - 2 f'(r2) v v^T
    d_center = np.empty((2, 2, m, n))
    d_center[0, 1] = half * ((1 - f) - 2 * fp * vx * vx)
    d_center[0, 0] = half * (-2 * fp * vx * vy)
    d_center[1, 1] = half * (-2 * fp * vx * vy)
    d_center[1, 0] = half * ((1 - f) - 2 * fp * vy * vy)
    return d_coeff, d_center


# ----------------------------------------------------------------------------
# Test patterns and serialization
# ----------------------------------------------------------------------------

def render_chessboard(m: int, n: int, rows: int = 7, cols: int = 11) -> np.ndarray:
    """Alternating 0/1 blocks on an ``m x n`` canvas, top-left block 1."""
    if rows < 1 or cols < 1:
        raise ValueError("chessboard needs at least one row and column")
    bi = (np.arange(m) * rows) // m
    bj = (np.arange(n) * cols) // n
    return ((bi[:, None] + bj[None, :]) % 2 == 0).astype(np.float64)


def write_params_stream(params: DistortionParams, stream: BinaryIO) -> None:
    stream.write(struct.pack("<I", params.order))
    stream.write(struct.pack(f"<{2 + params.order}d", *params.center, *params.coeffs))


def read_params_stream(stream: BinaryIO) -> DistortionParams:
    raw = stream.read(4)
    if len(raw) != 4:
        raise ValueError("truncated distortion block")
    (q,) = struct.unpack("<I", raw)
    body = stream.read(8 * (2 + q))
    if len(body) != 8 * (2 + q):
        raise ValueError("truncated distortion block")
    vals = struct.unpack(f"<{2 + q}d", body)
    return DistortionParams(coeffs=tuple(vals[2:]), center=(vals[0], vals[1]))
