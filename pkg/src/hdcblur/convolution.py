"""Discrete 2-D convolution with odd square kernels.

The convolution follows the indexing

    y[i, j] = sum_{h, l} k[c + h, c + l] * x[i + h, j + l],   c = s // 2,

so the kernel's central weight sits at lag (0, 0) and ``x`` is continued
outside its support by a :class:`~hdcblur.image.Boundary` rule. Under periodic
continuation the operator is block circulant with circulant blocks and is
diagonalized by the 2-D DFT; :func:`bccb_spectrum` returns its eigenvalues.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

from .image import Boundary, pad

# Above this side length the direct O(m n s^2) sum is replaced by an FFT.
DIRECT_MAX_SIDE = 15

KERNEL_MAGIC = b"KBK1"


def check_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be square, got shape {k.shape}")
    if k.shape[0] % 2 != 1:
        raise ValueError(f"kernel side must be odd, got {k.shape[0]}")
    if not np.all(np.isfinite(k)):
        raise ValueError("kernel contains NaN or Inf")
    return k


def delta_kernel(side: int = 1) -> np.ndarray:
    k = np.zeros((side, side))
    k[side // 2, side // 2] = 1.0
    return check_kernel(k)


def gaussian_kernel(side: int, sigma: float, normalize: bool = True) -> np.ndarray:
    """Sampled isotropic Gaussian on an odd ``side x side`` grid."""
    if side % 2 != 1:
        raise ValueError("kernel side must be odd")
    ax = np.arange(side) - side // 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    if normalize:
        k /= k.sum()
    return k


def rotate180(kernel: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint operator."""
    return np.ascontiguousarray(kernel[::-1, ::-1])


def convolve_direct(image: np.ndarray, kernel: np.ndarray,
                    boundary: Boundary = Boundary.REFLEXIVE) -> np.ndarray:
    """Brute-force shift-and-add evaluation of the convolution sum.

    Cost is O(m n s^2); intended for small kernels and as a reference.
    """
    k = check_kernel(kernel)
    s = k.shape[0]
    c = s // 2
    m, n = image.shape
    xp = pad(np.asarray(image, dtype=np.float64), c, Boundary.parse(boundary))
    out = np.zeros((m, n))
    for a in range(s):
        for b in range(s):
            w = k[a, b]
            if w != 0.0:
                out += w * xp[a:a + m, b:b + n]
    return out


def _wrap_kernel(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place kernel lag (h, l) at grid position (h mod m, l mod n), summing aliases."""
    s = kernel.shape[0]
    c = s // 2
    m, n = shape
    lags = np.arange(s) - c
    grid = np.zeros(shape)
    rows = np.mod(lags, m)[:, None]
    cols = np.mod(lags, n)[None, :]
    np.add.at(grid, (np.broadcast_to(rows, (s, s)), np.broadcast_to(cols, (s, s))), kernel)
    return grid


def convolve_fft(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Periodic convolution through the real FFT.

    Kernels wider than the image are wrapped around the grid (their aliased
    taps add up), which is exactly what periodic continuation implies. The
    side may not exceed twice the smaller image dimension.
    """
    k = check_kernel(kernel)
    m, n = image.shape
    if k.shape[0] > min(2 * m, 2 * n):
        raise ValueError(f"kernel side {k.shape[0]} does not fit a {m}x{n} grid")
    wrapped = _wrap_kernel(k, (m, n))
    transfer = np.conj(np.fft.rfft2(wrapped))
    return np.fft.irfft2(transfer * np.fft.rfft2(image), s=(m, n))


def bccb_spectrum(kernel: np.ndarray, m: int, n: int) -> np.ndarray:
    """Eigenvalues of the periodic convolution operator on an ``m x n`` grid.

    The returned complex ``(m, n)`` array ``H`` satisfies
    ``ifft2(H * fft2(x)).real == convolve_fft(x, kernel)``.
    """
    k = check_kernel(kernel)
    if k.shape[0] > min(m, n):
        raise ValueError(f"kernel side {k.shape[0]} does not fit a {m}x{n} grid")
    return np.conj(np.fft.fft2(_wrap_kernel(k, (m, n))))


def apply_spectrum(image: np.ndarray, spectrum: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(spectrum * np.fft.fft2(image)).real


def valid_correlation(padded: np.ndarray, template: np.ndarray) -> np.ndarray:
    """``out[a, b] = sum_ij template[i, j] * padded[i + a, j + b]``.

    ``padded`` is ``(m + s - 1, n + s - 1)`` and ``template`` ``(m, n)``; the
    result is ``s x s``. Used both for padded convolution (template = kernel
    swapped in role) and for the gradient of a loss with respect to the kernel.
    """
    P, Qn = padded.shape
    m, n = template.shape
    s_r, s_c = P - m + 1, Qn - n + 1
    if s_r * s_c <= DIRECT_MAX_SIDE ** 2:
        out = np.empty((s_r, s_c))
        for a in range(s_r):
            for b in range(s_c):
                out[a, b] = np.sum(template * padded[a:a + m, b:b + n])
        return out
    tpad = np.zeros_like(padded)
    tpad[:m, :n] = template
    full = np.fft.irfft2(np.conj(np.fft.rfft2(tpad)) * np.fft.rfft2(padded), s=padded.shape)
    return full[:s_r, :s_c]


def convolve(image: np.ndarray, kernel: np.ndarray,
             boundary: Boundary = Boundary.REFLEXIVE) -> np.ndarray:
    """Convolution with automatic choice between the direct and FFT paths.

    Small kernels use the direct sum. Larger kernels go through the FFT:
    directly for periodic continuation, otherwise on the grid extended by
    ``s // 2`` pixels and cropped back.
    """
    k = check_kernel(kernel)
    boundary = Boundary.parse(boundary)
    s = k.shape[0]
    if s <= DIRECT_MAX_SIDE:
        return convolve_direct(image, k, boundary)
    m, n = image.shape
    if boundary is Boundary.PERIODIC and s <= min(2 * m, 2 * n):
        return convolve_fft(image, k)
    c = s // 2
    xp = pad(np.asarray(image, dtype=np.float64), c, boundary)
    kpad = np.zeros_like(xp)
    kpad[:s, :s] = k
    full = np.fft.irfft2(np.conj(np.fft.rfft2(kpad)) * np.fft.rfft2(xp), s=xp.shape)
    return full[:m, :n]


def kernel_gradient(image: np.ndarray, upstream: np.ndarray, side: int,
                    boundary: Boundary = Boundary.REFLEXIVE) -> np.ndarray:
    """Gradient of ``sum(upstream * convolve(image, k))`` with respect to ``k``."""
    c = side // 2
    xp = pad(np.asarray(image, dtype=np.float64), c, Boundary.parse(boundary))
    return valid_correlation(xp, upstream)


# ----------------------------------------------------------------------------
# KBK1 kernel files
# ----------------------------------------------------------------------------

def write_kernel_stream(kernel: np.ndarray, stream: BinaryIO) -> None:
    k = check_kernel(kernel)
    s = k.shape[0]
    stream.write(KERNEL_MAGIC)
    stream.write(struct.pack("<III", s, s, 0))
    stream.write(np.ascontiguousarray(k, dtype="<f8").tobytes())


def read_kernel_stream(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != KERNEL_MAGIC:
        raise ValueError(f"bad kernel magic {magic!r}")
    header = stream.read(12)
    if len(header) != 12:
        raise ValueError("truncated kernel header")
    s1, s2, _reserved = struct.unpack("<III", header)
    if s1 != s2:
        raise ValueError(f"non-square kernel {s1}x{s2}")
    nbytes = 8 * s1 * s2
    buf = stream.read(nbytes)
    if len(buf) != nbytes:
        raise ValueError("truncated kernel payload")
    return check_kernel(np.frombuffer(buf, dtype="<f8").reshape(s1, s2).astype(np.float64))


def save_kernel(kernel: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        write_kernel_stream(kernel, fh)


def load_kernel(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_kernel_stream(fh)
