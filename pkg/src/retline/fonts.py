"""Builtin 5x7 bitmap glyphs for deterministic synthetic line rendering.

Letters a-z render with upright capital letterforms; the mapping only needs
to be distinct and deterministic per character, not typographic.
"""

from __future__ import annotations

import numpy as np

GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7

_GLYPHS = {
    "a": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "b": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "c": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "d": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "e": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "f": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "g": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "h": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "i": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "j": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "k": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "l": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "m": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "n": ("10001", "11001", "10101", "10011", "10001", "10001", "10001"),
    "o": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "p": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "r": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "s": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "t": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "u": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "v": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "w": ("10001", "10001", "10001", "10101", "10101", "11011", "10001"),
    "x": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    " ": ("00000", "00000", "00000", "00000", "00000", "00000", "00000"),
}

SUPPORTED_CHARS = "".join(sorted(_GLYPHS))


def glyph_bitmap(char: str) -> np.ndarray:
    """(7, 5) float array for one character, foreground 1.0 on background 0.0."""
    rows = _GLYPHS.get(char)
    if rows is None:
        raise KeyError(f"no builtin glyph for character {char!r}")
    return np.array([[float(c) for c in row] for row in rows])


def has_glyph(char: str) -> bool:
    return char in _GLYPHS
