"""Embedded 8x16 bitmap font and the glyph backend interface.

The table covers printable ASCII (0x20-0x7E). Each glyph is 16 rows of one
byte, most significant bit leftmost, stored as 32 hex digits. Set bits are ink.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

CELL_HEIGHT = 16
CELL_WIDTH = 8

_ASCII_8X16 = """
    00000000000000000000000000000000
    00001818181818080000181800000000
    00003434343400000000000000000000
    00001a12127f3424ff2c684800000000
    0008083c6a68683c0a0b4a3e08080000
    000070d8d8730c304e09090f00000000
    00003c2020307059cdc7673f00000000
    00001818181800000000000000000000
    00040808181810101818080804000000
    0010101808080c0c0808181010000000
    0000086a3c3c6a080000000000000000
    00000000080808ff0808080000000000
    00000000000000000000181818100000
    00000000000000003c00000000000000
    00000000000000000000181800000000
    00000206040c08181810302060400000
    00003c266263435b6362263c00000000
    00001828080808080808083f00000000
    00003c460206060c1830607e00000000
    00003c4602061c060202463c00000000
    00000e0e163626467f06060600000000
    00007e60607c46020202463c00000000
    00001c3260407c666363663c00000000
    00007e0206040c0c0818103000000000
    00003c6662663c664343663c00000000
    00003c664243673f0202063c00000000
    00000000001818000000181800000000
    00000000001818000000181818100000
    00000000030e78e0780e030000000000
    0000000000ff0000ff00000000000000
    0000000040781e031e78400000000000
    00003c2602060c181800181800000000
    00001e6341cfdb91919bcf40301e0000
    0000181c3c3426267e4343c300000000
    00007c6663667c626363637e00000000
    00001e32606060606060321e00000000
    00007c46424343434342467c00000000
    00007f6060607e606060607f00000000
    00007f6060607e606060606000000000
    00001e32604040474363331e00000000
    0000434343437f434343434300000000
    00007e18181818181818187e00000000
    00003e060606060606064c7800000000
    000043464c5878684c46424300000000
    00006060606060606060607f00000000
    0000e3e7e7d7dbdbc3c3c3c300000000
    0000636373535b4b4f47474700000000
    00003c66624343434362663c00000000
    00007e636363637e6060606000000000
    00003c66624343434362663c06020000
    00007c464242467c4642434100000000
    00003c624060381e0303463c00000000
    0000ff18181818181818181800000000
    00006363636363636362663c00000000
    0000c34362622626341c1c1800000000
    0000c1c1c1d95b5f7776666600000000
    00004362361c181c342662c300000000
    0000c36226341c181818181800000000
    00007f03060c0c181030607f00000000
    001c181818181818181818181c000000
    000040602030101818080c0406020000
    00380808080808080808080838000000
    0000183c264300000000000000000000
    0000000000000000000000000000ff00
    30100800000000000000000000000000
    000000003c66023e6242663a00000000
    006060607c6663636363667c00000000
    000000001e3260606060321e00000000
    000202023e6642424242663e00000000
    000000003c62437f4060623e00000000
    000e18187e1818181818181800000000
    000000003e6662424262663e02263c00
    006060607c6662626262626200000000
    00080800380808080808087f00000000
    00080800380808080808080808087800
    00606060626468786c66626300000000
    00781818181818181818180e00000000
    000000007e5b4b4b4b4b4b4b00000000
    000000007c6662626262626200000000
    000000003c6662434362663c00000000
    000000007c6662636363667c60606000
    000000003e6662424262663e02020200
    000000003f3830303030303000000000
    000000003c2260380e02663c00000000
    000010107e1010101010180e00000000
    00000000626262626262663a00000000
    0000000043626626343c1c1800000000
    0000000081c1d95b5f76762600000000
    0000000062263c181c34664300000000
    0000000043622226341c1c1818107000
    000000007e0604081830607e00000000
    000e08081818187018181808080e0000
    00181818181818181818181818181800
    007018181818080e0818181818700000
    00000000000000790e00000000000000
"""


def _decode_table(table: str) -> dict[str, np.ndarray]:
    glyphs = {}
    for code, hx in zip(range(0x20, 0x7F), table.split()):
        rows = np.frombuffer(bytes.fromhex(hx), dtype=np.uint8)
        glyphs[chr(code)] = np.unpackbits(rows[:, None], axis=1).astype(bool)
    return glyphs


def _hollow_box(height: int = CELL_HEIGHT, width: int = CELL_WIDTH) -> np.ndarray:
    box = np.zeros((height, width), dtype=bool)
    box[2, 1:width - 1] = True
    box[height - 3, 1:width - 1] = True
    box[2:height - 2, 1] = True
    box[2:height - 2, width - 2] = True
    return box


class GlyphBackend(Protocol):
    """Anything that can hand the renderer a bitmap and an advance per character."""

    height_px: int

    def glyph(self, ch: str) -> np.ndarray: ...

    def advance(self, ch: str) -> int: ...


@dataclass(frozen=True)
class GlyphSet:
    """Bitmap glyphs keyed by character, with a replacement for anything unmapped.

    Bitmaps are boolean arrays of shape ``(height_px, advance)``; True is ink.
    """

    bitmaps: Mapping[str, np.ndarray]
    replacement: np.ndarray
    height_px: int = CELL_HEIGHT
    font_id: str = "ascii8x16"
    _advances: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adv = {ch: int(bm.shape[1]) for ch, bm in self.bitmaps.items()}
        if any(a < 1 for a in adv.values()) or self.replacement.shape[1] < 1:
            raise ValueError("glyph advances must be >= 1")
        for bm in list(self.bitmaps.values()) + [self.replacement]:
            if bm.shape[0] != self.height_px:
                raise ValueError("glyph height does not match height_px")
        object.__setattr__(self, "_advances", adv)

    def glyph(self, ch: str) -> np.ndarray:
        return self.bitmaps.get(ch, self.replacement)

    def advance(self, ch: str) -> int:
        return self._advances.get(ch, self.replacement.shape[1])

    def __contains__(self, ch: str) -> bool:
        return ch in self.bitmaps


_DEFAULT: GlyphSet | None = None


def default_glyphs() -> GlyphSet:
    """The embedded fixed-advance ASCII font (8 px advance, 16 px tall)."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = GlyphSet(_decode_table(_ASCII_8X16), _hollow_box())
    return _DEFAULT
