"""Grayscale raster helpers shared by every other module.

Images are plain 2-D ``float64`` numpy arrays of shape ``(m, n)``. Values are
nominally in ``[0, 1]`` but intermediate results may leave that range.
Pixel ``(i, j)`` has its continuous center at ``(x, y) = (j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import enum
import io
import os
from pathlib import Path
from typing import BinaryIO

import numpy as np


class ImageFormatError(ValueError):
    """Raised for unreadable, unsupported or malformed raster files."""


class Boundary(enum.IntEnum):
    """How an image is continued outside its ``m x n`` support.

    The integer values are the codes used in the model file format.
    """

    ZERO = 0
    PERIODIC = 1
    REFLEXIVE = 2

    @classmethod
    def parse(cls, value: "Boundary | str | int") -> "Boundary":
        if isinstance(value, Boundary):
            return value
        if isinstance(value, str):
            key = value.strip().upper()
            aliases = {"ZEROPAD": "ZERO", "ZERO_PAD": "ZERO", "REFLECT": "REFLEXIVE",
                       "SYMMETRIC": "REFLEXIVE", "WRAP": "PERIODIC"}
            key = aliases.get(key, key)
            try:
                return cls[key]
            except KeyError:
                raise ValueError(f"unknown boundary condition {value!r}") from None
        return cls(int(value))

    @property
    def pad_mode(self) -> str:
        return {Boundary.ZERO: "constant", Boundary.PERIODIC: "wrap",
                Boundary.REFLEXIVE: "symmetric"}[self]


def as_image(values, copy: bool = False) -> np.ndarray:
    """Validate and convert ``values`` to an image array.

    Raises ``ValueError`` when the array is not 2-D, is empty or holds
    non-finite values.
    """
    img = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must have positive dimensions, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains NaN or Inf")
    return img


def pad(image: np.ndarray, width: int, boundary: Boundary) -> np.ndarray:
    """Extend ``image`` by ``width`` pixels on every side using ``boundary``."""
    if width == 0:
        return image
    return np.pad(image, width, mode=Boundary.parse(boundary).pad_mode)


# ----------------------------------------------------------------------------
# PGM / PNG I/O
# ----------------------------------------------------------------------------

def _read_token(stream: BinaryIO) -> bytes:
    token = b""
    while True:
        ch = stream.read(1)
        if not ch:
            if token:
                return token
            raise ImageFormatError("unexpected end of PGM header")
        if ch == b"#" and not token:
            stream.readline()
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pgm(stream: BinaryIO) -> tuple[np.ndarray, int]:
    """Read one binary PGM (P5) from ``stream``.

    Returns the normalized image and the bit depth (8 or 16). The stream is
    left positioned right after the pixel payload, so PGMs can be embedded in
    larger binary containers.
    """
    magic = stream.read(2)
    if magic != b"P5":
        raise ImageFormatError(f"not a binary PGM (magic {magic!r})")
    try:
        width = int(_read_token(stream))
        height = int(_read_token(stream))
        maxval = int(_read_token(stream))
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    # _read_token consumed exactly one whitespace byte after maxval
    if width < 1 or height < 1:
        raise ImageFormatError(f"zero-dimension image ({width}x{height})")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    buf = stream.read(nbytes)
    if len(buf) != nbytes:
        raise ImageFormatError("truncated PGM payload")
    raw = np.frombuffer(buf, dtype=dtype).reshape(height, width)
    bits = 16 if maxval > 255 else 8
    return raw.astype(np.float64) / maxval, bits


def encode_pgm(image: np.ndarray, bits: int = 8) -> bytes:
    """Clamp to [0, 1], quantize with ``round(v * maxval)`` and encode as P5."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = as_image(image)
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u2" if bits == 16 else "u1"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    return header + q.astype(dtype).tobytes()


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load a grayscale raster and map its stored range linearly onto [0, 1].

    Binary PGM (8 and 16 bit) is always supported. PNG is read through Pillow
    when it is installed; color PNGs are averaged to luminance.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
        fh.seek(0)
        if head[:2] == b"P5":
            img, _ = read_pgm(fh)
            return img
        if head == b"\x89PNG\r\n\x1a\n":
            return _load_png(fh)
    raise ImageFormatError(f"{path}: unsupported image format")


def _load_png(fh: BinaryIO) -> np.ndarray:
    try:
        from PIL import Image as PILImage
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageFormatError("PNG support requires Pillow") from exc
    with PILImage.open(io.BytesIO(fh.read())) as pim:
        mode = pim.mode
        arr = np.asarray(pim)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    else:
        scale = 255.0
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2) if arr.shape[2] >= 3 else arr[..., 0]
    if arr.size == 0:
        raise ImageFormatError("zero-dimension image")
    return arr / scale


def save_image(image: np.ndarray, path: str | os.PathLike, bits: int = 8) -> None:
    """Write ``image`` as a binary PGM of the given bit depth."""
    data = encode_pgm(image, bits)
    with open(path, "wb") as fh:
        fh.write(data)


# ----------------------------------------------------------------------------
# Sampling and cropping
# ----------------------------------------------------------------------------

def boundary_index(idx: np.ndarray, size: int, boundary: Boundary) -> tuple[np.ndarray, np.ndarray]:
    """Map integer indices into ``[0, size)`` following ``boundary``.

    Returns ``(mapped, inside)``; ``inside`` is False only for zero padding
    where the continued value is 0.
    """
    boundary = Boundary.parse(boundary)
    if boundary is Boundary.PERIODIC:
        return np.mod(idx, size), np.ones(idx.shape, dtype=bool)
    if boundary is Boundary.REFLEXIVE:
        period = 2 * size
        r = np.mod(idx, period)
        return np.where(r < size, r, period - 1 - r), np.ones(idx.shape, dtype=bool)
    inside = (idx >= 0) & (idx < size)
    return np.clip(idx, 0, size - 1), inside


def bilinear_stencil(shape: tuple[int, int], rows: np.ndarray, cols: np.ndarray,
                     boundary: Boundary):
    """Flat indices and weights of the four bilinear neighbors.

    ``rows`` and ``cols`` are continuous *index* coordinates (pixel ``(i, j)``
    sits at ``(i, j)``). Returns ``(index, weight, frac_r, frac_c, inside)`` where
    ``index`` and ``weight`` have shape ``(4,) + rows.shape`` ordered
    (r0c0, r0c1, r1c0, r1c1). Neighbors outside a zero-padded image get weight
    zero; ``inside`` flags the neighbors that carry image data.
    """
    m, n = shape
    r0f = np.floor(rows)
    c0f = np.floor(cols)
    fr = rows - r0f
    fc = cols - c0f
    r0 = r0f.astype(np.int64)
    c0 = c0f.astype(np.int64)
    ra, ia = boundary_index(r0, m, boundary)
    rb, ib = boundary_index(r0 + 1, m, boundary)
    ca, ja = boundary_index(c0, n, boundary)
    cb, jb = boundary_index(c0 + 1, n, boundary)
    index = np.stack([ra * n + ca, ra * n + cb, rb * n + ca, rb * n + cb])
    inside = np.stack([ia & ja, ia & jb, ib & ja, ib & jb])
    weight = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc]) * inside
    return index, weight, fr, fc, inside


def sample_bilinear(image: np.ndarray, rows, cols, boundary: Boundary = Boundary.REFLEXIVE) -> np.ndarray:
    """Vectorized bilinear interpolation at continuous index coordinates."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    index, weight, *_ = bilinear_stencil(image.shape, rows, cols, boundary)
    flat = image.ravel()
    return np.sum(flat[index] * weight, axis=0)


def sample_at(image: np.ndarray, x: float, y: float, boundary: Boundary = Boundary.REFLEXIVE) -> float:
    """Bilinear intensity at the continuous pixel-unit position ``(x, y)``.

    Pixel centers are at half-integers, so ``sample_at(img, j + 0.5, i + 0.5)``
    returns ``img[i, j]``.
    """
    return float(sample_bilinear(image, np.array(y - 0.5), np.array(x - 0.5), boundary))


def crop(image: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    m, n = image.shape
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > m or left + w > n:
        raise ValueError(f"crop rectangle ({top}, {left}, {h}, {w}) outside {m}x{n} image")
    return image[top:top + h, left:left + w].copy()


def psnr(estimate: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    mse = float(np.mean((np.asarray(estimate) - np.asarray(reference)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
