"""Synthetic training data: random text renders and natural-image patchworks.

Both categories are pushed through a :class:`~hdcblur.forward.ForwardModel`
so the blurry half of every pair carries the estimated blur, distortion and
amplitude-dependent noise.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import string
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .font import BitmapFont
from .forward import ForwardModel, NoiseSpec, add_noise, apply, make_rng
from .image import ImageFormatError, load_image, save_image

DEFAULT_CHARSET = string.ascii_uppercase + string.ascii_lowercase + string.digits + ".,:;!?+-="
INK = 0.1
PAPER = 0.9


class Category(str, enum.Enum):
    SYNTH_HDC = "SynthHDC"
    SANITY = "Sanity"


@dataclass(frozen=True)
class TextSpec:
    charset: str = DEFAULT_CHARSET
    min_len: int = 8
    max_len: int = 16
    lines: int = 2
    font: str = "builtin"
    glyph_height: int = 14

    def __post_init__(self):
        if not self.charset:
            raise ValueError("charset must not be empty")
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("need 0 <= min_len <= max_len")
        if self.lines < 1 or self.glyph_height < 1:
            raise ValueError("lines and glyph_height must be positive")

    def load_font(self) -> BitmapFont:
        if self.font == "builtin":
            return BitmapFont.builtin()
        return BitmapFont.from_atlas(self.font)


def sample_seed(seed) -> int:
    """Collapse any seed (int or SeedSequence) to a 63-bit integer seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def random_text(spec: TextSpec, seed) -> str:
    rng = make_rng(seed)
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    picks = rng.integers(0, len(spec.charset), size=length)
    return "".join(spec.charset[i] for i in picks)


def _layout(text: str, capacity: int, max_lines: int) -> list[str]:
    lines: list[str] = []
    for raw in text.split("\n"):
        if capacity <= 0:
            break
        chunks = [raw[i:i + capacity] for i in range(0, len(raw), capacity)] or [""]
        lines.extend(chunks)
    lines = lines[:max_lines]
    while lines and not lines[-1]:
        lines.pop()
    return lines


def render_text_image(text: str, spec: TextSpec, dims: tuple[int, int],
                      font: Optional[BitmapFont] = None) -> tuple[np.ndarray, str]:
    """Draw ``text`` as dark glyphs on a light canvas of shape ``dims``.

    Explicit newlines start new lines; longer lines wrap at the canvas width
    and anything beyond ``spec.lines`` lines is dropped. The returned ground
    truth is exactly what was drawn, lines joined by ``"\\n"``.
    """
    m, n = dims
    font = font or spec.load_font()
    scale = max(1, spec.glyph_height // font.height)
    gw, gh = font.width * scale, font.height * scale
    advance = gw + scale
    line_pitch = gh + 3 * scale
    capacity = (n + scale) // advance
    max_lines = min(spec.lines, (m + 3 * scale) // line_pitch)
    lines = _layout(text, capacity, max_lines)

    canvas = np.full((m, n), PAPER)
    missing = sorted({ch for line in lines for ch in line if not font.has_glyph(ch)})
    if missing:
        warnings.warn(f"font {font.name!r} lacks glyphs {missing!r}; substituted", stacklevel=2)
    if lines:
        block_h = len(lines) * line_pitch - 3 * scale
        top = (m - block_h) // 2
        for li, line in enumerate(lines):
            width = len(line) * advance - scale
            left = (n - width) // 2
            y0 = top + li * line_pitch
            for ci, ch in enumerate(line):
                mask = np.kron(font.glyph(ch), np.ones((scale, scale), dtype=bool))
                x0 = left + ci * advance
                canvas[y0:y0 + gh, x0:x0 + gw][mask] = INK
    return canvas, "\n".join(lines)


def synth_hdc_pair(model: ForwardModel, spec: TextSpec, seed, dims: Optional[tuple[int, int]] = None,
                   noisy: bool = True, font: Optional[BitmapFont] = None):
    """Random text render and its simulated blurry observation.

    Returns ``(sharp, blurry, text)``; one random line per ``spec.lines``.
    """
    dims = dims or model.shape
    if dims is None:
        raise ValueError("image dimensions are needed when the model has no backgrounds")
    text_seed, noise_seed = np.random.SeedSequence(sample_seed(seed)).spawn(2)
    line_seeds = text_seed.spawn(spec.lines)
    text = "\n".join(random_text(spec, s) for s in line_seeds)
    sharp, truth = render_text_image(text, spec, dims, font)
    blurry = apply(model, sharp)
    if noisy:
        blurry = add_noise(blurry, NoiseSpec(model.noise_variance, noise_seed))
    return sharp, blurry, truth


def _resize_nearest(image: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = image.shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return image[rows[:, None], cols[None, :]]


def sanity_patchwork(corpus: Sequence[np.ndarray], dims: tuple[int, int], seed) -> np.ndarray:
    """3x3 patchwork of randomly drawn corpus images, randomly cropped to ``dims``."""
    if len(corpus) == 0:
        raise ValueError("sanity corpus is empty")
    m, n = dims
    rng = make_rng(seed)
    th, tw = math.ceil(m / 3), math.ceil(n / 3)
    picks = rng.integers(0, len(corpus), size=9)
    tiles = [_resize_nearest(np.asarray(corpus[i], dtype=np.float64), th, tw) for i in picks]
    board = np.block([tiles[0:3], tiles[3:6], tiles[6:9]])
    top = int(rng.integers(0, board.shape[0] - m + 1))
    left = int(rng.integers(0, board.shape[1] - n + 1))
    return board[top:top + m, left:left + n].copy()


def load_corpus(directory: str | os.PathLike) -> list[np.ndarray]:
    images = []
    for path in sorted(Path(directory).iterdir()):
        if not path.is_file():
            continue
        try:
            images.append(load_image(path))
        except ImageFormatError:
            continue
    return images


@dataclass
class StreamConfig:
    model: ForwardModel
    text_spec: TextSpec = field(default_factory=TextSpec)
    sanity_corpus: Sequence[np.ndarray] | str | os.PathLike = ()
    mix: tuple[int, int] = (20, 1)
    seed: int = 0
    dims: Optional[tuple[int, int]] = None
    noisy: bool = True

    def __post_init__(self):
        if min(self.mix) < 0:
            raise ValueError("sample counts must be nonnegative")
        if isinstance(self.sanity_corpus, (str, os.PathLike)):
            self.sanity_corpus = load_corpus(self.sanity_corpus)
        if self.mix[1] > 0 and len(self.sanity_corpus) == 0:
            raise ValueError("sanity samples requested but the corpus is empty")
        self.dims = self.dims or self.model.shape
        if self.dims is None:
            raise ValueError("image dimensions are needed when the model has no backgrounds")


@dataclass
class Sample:
    category: Category
    sharp: np.ndarray
    blurry: np.ndarray
    text: Optional[str]
    seed: int


def stream(config: StreamConfig) -> Iterator[Sample]:
    """Yield ``sum(config.mix)`` samples in a seeded random interleaving."""
    n_text, n_sanity = config.mix
    total = n_text + n_sanity
    root = np.random.SeedSequence(config.seed)
    order_seed, *sample_seeds = root.spawn(total + 1)
    labels = np.array([Category.SYNTH_HDC] * n_text + [Category.SANITY] * n_sanity, dtype=object)
    labels = labels[make_rng(order_seed).permutation(total)] if total else labels
    font = config.text_spec.load_font()
    model = config.model
    for label, ss in zip(labels, sample_seeds):
        seed = sample_seed(ss)
        if label is Category.SYNTH_HDC:
            sharp, blurry, text = synth_hdc_pair(model, config.text_spec, seed, config.dims,
                                                 config.noisy, font)
            yield Sample(label, sharp, blurry, text, seed)
        else:
            patch_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
            sharp = sanity_patchwork(config.sanity_corpus, config.dims, patch_seed)
            blurry = apply(model, sharp)
            if config.noisy:
                blurry = add_noise(blurry, NoiseSpec(model.noise_variance, noise_seed))
            yield Sample(label, sharp, blurry, None, seed)


def write_dataset(samples, out_dir: str | os.PathLike, level: int, bits: int = 16) -> Path:
    """Write samples as ``level_<k>/sample_<j>_{sharp,blurry}.pgm`` plus texts and a manifest."""
    root = Path(out_dir) / f"level_{level}"
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "category", "seed"])
        for j, sample in enumerate(samples):
            save_image(sample.sharp, root / f"sample_{j}_sharp.pgm", bits)
            save_image(sample.blurry, root / f"sample_{j}_blurry.pgm", bits)
            if sample.text is not None:
                with open(root / f"sample_{j}.txt", "w", encoding="utf-8", newline="\n") as tf:
                    tf.write(sample.text + "\n")
            writer.writerow([j, sample.category.value, sample.seed])
    return root
