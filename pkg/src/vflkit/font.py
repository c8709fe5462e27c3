"""Built-in 5x7 bitmap glyphs and object stencils used by the task renderers."""

from __future__ import annotations

import numpy as np

GLYPH_W = 5
GLYPH_H = 7

# Classic 5x7 capitals, keyed by the lowercase letter they render.
_GLYPH_ROWS = {
    "a": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "b": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "c": ["01110", "10001", "10000", "10000", "10000", "10001", "01110"],
    "d": ["11100", "10010", "10001", "10001", "10001", "10010", "11100"],
    "e": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "f": ["11111", "10000", "10000", "11110", "10000", "10000", "10000"],
    "g": ["01110", "10001", "10000", "10111", "10001", "10001", "01111"],
    "h": ["10001", "10001", "10001", "11111", "10001", "10001", "10001"],
    "i": ["01110", "00100", "00100", "00100", "00100", "00100", "01110"],
    "j": ["00111", "00010", "00010", "00010", "00010", "10010", "01100"],
    "k": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "l": ["10000", "10000", "10000", "10000", "10000", "10000", "11111"],
    "m": ["10001", "11011", "10101", "10101", "10001", "10001", "10001"],
    "n": ["10001", "10001", "11001", "10101", "10011", "10001", "10001"],
    "o": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "p": ["11110", "10001", "10001", "11110", "10000", "10000", "10000"],
    "q": ["01110", "10001", "10001", "10001", "10101", "10010", "01101"],
    "r": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "s": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "t": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "u": ["10001", "10001", "10001", "10001", "10001", "10001", "01110"],
    "v": ["10001", "10001", "10001", "10001", "10001", "01010", "00100"],
    "w": ["10001", "10001", "10001", "10101", "10101", "10101", "01010"],
    "x": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
    "y": ["10001", "10001", "01010", "00100", "00100", "00100", "00100"],
    "z": ["11111", "00001", "00010", "00100", "01000", "10000", "11111"],
}

# 8x8 stencils for the recognition objects.
_OBJECT_ROWS = {
    "cross": ["00011000", "00011000", "00011000", "11111111",
              "11111111", "00011000", "00011000", "00011000"],
    "ring": ["00111100", "01000010", "10000001", "10000001",
             "10000001", "10000001", "01000010", "00111100"],
    "tee": ["11111111", "11111111", "00011000", "00011000",
            "00011000", "00011000", "00011000", "00011000"],
    "wedge": ["10000000", "11000000", "11100000", "11110000",
              "11111000", "11111100", "11111110", "11111111"],
}


def _to_array(rows: list[str]) -> np.ndarray:
    return np.array([[c == "1" for c in r] for r in rows], dtype=np.float32)


GLYPHS: dict[str, np.ndarray] = {k: _to_array(v) for k, v in _GLYPH_ROWS.items()}
OBJECTS: dict[str, np.ndarray] = {k: _to_array(v) for k, v in _OBJECT_ROWS.items()}
OBJECT_KINDS: tuple[str, ...] = tuple(sorted(OBJECTS))


def glyph(ch: str) -> np.ndarray:
    try:
        return GLYPHS[ch]
    except KeyError:
        raise ValueError(f"no glyph for {ch!r}") from None
