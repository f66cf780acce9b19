"""Embedded 5x7 monospace bitmap font and optional glyph atlases.

Each built-in glyph is seven rows of five bits, most significant bit on the
left, stored as 14 hex digits. The glyph shapes are an original drawing in
the style of the classic public-domain 5x7 LCD fonts.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .image import load_image

GLYPH_W = 5
GLYPH_H = 7

_GLYPHS = {
    " ": "00000000000000",
    'A': "0e11111f111111",
    'B': "1e11111e11111e",
    'C': "0e11101010110e",
    'D': "1c12111111121c",
    'E': "1f10101e10101f",
    'F': "1f10101e101010",
    'G': "0e11101711110f",
    'H': "1111111f111111",
    'I': "0e04040404040e",
    'J': "0702020202120c",
    'K': "11121418141211",
    'L': "1010101010101f",
    'M': "111b1515111111",
    'N': "11111915131111",
    'O': "0e11111111110e",
    'P': "1e11111e101010",
    'Q': "0e11111115120d",
    'R': "1e11111e141211",
    'S': "0f10100e01011e",
    'T': "1f040404040404",
    'U': "1111111111110e",
    'V': "11111111110a04",
    'W': "1111111515150a",
    'X': "11110a040a1111",
    'Y': "11110a04040404",
    'Z': "1f01020408101f",
    'a': "00000e010f110f",
    'b': "1010161911111e",
    'c': "00000e1010110e",
    'd': "01010d1311110f",
    'e': "00000e111f100e",
    'f': "0609081c080808",
    'g': "000f11110f010e",
    'h': "10101619111111",
    'i': "04000c0404040e",
    'j': "0200060202120c",
    'k': "10101214181412",
    'l': "0c04040404040e",
    'm': "00001a15151111",
    'n': "00001619111111",
    'o': "00000e1111110e",
    'p': "00001e111e1010",
    'q': "00000d130f0101",
    'r': "00001619101010",
    's': "00000e100e011e",
    't': "08081c08080906",
    'u': "0000111111130d",
    'v': "00001111110a04",
    'w': "0000111115150a",
    'x': "0000110a040a11",
    'y': "000011110f010e",
    'z': "00001f0204081f",
    '0': "0e11131519110e",
    '1': "040c040404040e",
    '2': "0e11010204081f",
    '3': "1f02040201110e",
    '4': "02060a121f0202",
    '5': "1f101e0101110e",
    '6': "0608101e11110e",
    '7': "1f010204080808",
    '8': "0e11110e11110e",
    '9': "0e11110f01020c",
    '.': "00000000000c0c",
    ',': "000000000c0408",
    ':': "000c0c000c0c00",
    ';': "000c0c000c0408",
    '!': "04040404040004",
    '?': "0e110102040004",
    '+': "0004041f040400",
    '-': "0000001f000000",
    '=': "00001f001f0000",
    '(': "02040808080402",
    ')': "08040202020408",
    '/': "00010204081000",
    "'": "04040800000000",
}

# shown for characters the font lacks
_MISSING = "1f11111111111f"


def _decode(hexrows: str) -> np.ndarray:
    rows = [int(hexrows[i:i + 2], 16) for i in range(0, 2 * GLYPH_H, 2)]
    bits = [[(r >> (GLYPH_W - 1 - b)) & 1 for b in range(GLYPH_W)] for r in rows]
    return np.array(bits, dtype=bool)


class BitmapFont:
    """Monospace font: ``glyph(ch)`` returns a boolean ink mask.

    All glyphs share one cell size. Characters outside the font are drawn
    with a hollow box and reported by :meth:`has_glyph`.
    """

    def __init__(self, glyphs: dict[str, np.ndarray], missing: np.ndarray, name: str = "builtin-5x7"):
        shapes = {g.shape for g in glyphs.values()} | {missing.shape}
        if len(shapes) != 1:
            raise ValueError(f"glyphs must share one size, got {sorted(shapes)}")
        self.glyphs = glyphs
        self.missing = missing
        self.name = name
        self.height, self.width = missing.shape

    @classmethod
    def builtin(cls) -> "BitmapFont":
        return cls({ch: _decode(h) for ch, h in _GLYPHS.items()}, _decode(_MISSING))

    @classmethod
    def from_atlas(cls, directory: str | os.PathLike) -> "BitmapFont":
        """Load pre-rasterized glyphs from ``<hex codepoint>.pgm`` files.

        Dark pixels (< 0.5) are ink. Glyphs are padded on the right and bottom
        to the largest cell so the font stays monospace.
        """
        directory = Path(directory)
        raw = {}
        for path in sorted(directory.glob("*.pgm")):
            try:
                ch = chr(int(path.stem, 16))
            except ValueError:
                continue
            raw[ch] = load_image(path) < 0.5
        if not raw:
            raise ValueError(f"no glyph files found in {directory}")
        h = max(g.shape[0] for g in raw.values())
        w = max(g.shape[1] for g in raw.values())

        def fit(g):
            out = np.zeros((h, w), dtype=bool)
            out[:g.shape[0], :g.shape[1]] = g
            return out

        box = np.zeros((h, w), dtype=bool)
        box[0, :] = box[-1, :] = box[:, 0] = box[:, -1] = True
        return cls({ch: fit(g) for ch, g in raw.items()}, box, name=directory.name)

    def has_glyph(self, ch: str) -> bool:
        return ch in self.glyphs

    def glyph(self, ch: str) -> np.ndarray:
        return self.glyphs.get(ch, self.missing)
