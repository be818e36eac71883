"""Rasterize text onto fixed-height RGB strips split into square patches.

A strip is ``height_px`` tall and ``max_patches * patch_px`` wide. Content is
laid out left to right starting ``padding_px`` in from the left edge (and
again after every delimiter). Each rendered segment is followed by one
all-black patch, which doubles as segment delimiter and end-of-sequence
marker. Everything after the final black patch is white padding.

Whitespace is collapsed: the text is split into words and re-joined with
single spaces. Together with the embedded font (every non-space glyph has
ink within 3 px of each cell edge) this guarantees that no content patch is
ever entirely white, so patch roles can always be recovered from pixels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import RenderOverflow, ShapeError
from .font import GlyphSet, default_glyphs


class Role(IntEnum):
    CONTENT = 0
    EOS = 1
    PAD = 2


@dataclass(frozen=True)
class RenderConfig:
    height_px: int = 16
    max_patches: int = 1024
    patch_px: int = 16
    channels: int = 3
    background: tuple[int, ...] = (255, 255, 255)
    font_color: tuple[int, ...] = (0, 0, 0)
    dpi: int = 120
    font_size: int = 8
    padding_px: int = 3
    font_id: str = "ascii8x16"

    def __post_init__(self):
        if self.patch_px != self.height_px:
            raise ValueError(f"patch_px ({self.patch_px}) must equal height_px ({self.height_px})")
        if self.max_patches < 1:
            raise ValueError("max_patches must be positive")
        if len(self.background) != self.channels or len(self.font_color) != self.channels:
            raise ValueError("background and font_color need one value per channel")

    @property
    def width_px(self) -> int:
        return self.max_patches * self.patch_px

    @property
    def content_budget_px(self) -> int:
        """Widest run of text that fits in front of the closing black patch."""
        return (self.max_patches - 1) * self.patch_px - self.padding_px


@dataclass(frozen=True)
class RenderedStrip:
    pixels: np.ndarray  # (height, width, channels) uint8
    used_patches: int
    patch_roles: np.ndarray = field(repr=False)  # (max_patches,) uint8 Role codes

    @property
    def n_patches(self) -> int:
        return len(self.patch_roles)

    @property
    def content_patches(self) -> int:
        return int(np.count_nonzero(self.patch_roles == Role.CONTENT))


def measure_text(text: str, glyphs: GlyphSet) -> int:
    return sum(glyphs.advance(ch) for ch in text)


def fit_words(words: Sequence[str], budget_px: int, glyphs: GlyphSet) -> int:
    """Largest ``k`` such that ``" ".join(words[:k])`` is at most ``budget_px`` wide.

    Binary search over ``k``; the joined width is strictly increasing in ``k``
    for non-empty words, so only O(log n) measurements are made.
    """
    if budget_px < 0:
        raise ValueError("budget_px must be non-negative")
    lo, hi = 0, len(words)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if measure_text(" ".join(words[:mid]), glyphs) <= budget_px:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _split_word(word: str, budget_px: int, glyphs: GlyphSet) -> tuple[str, str]:
    # At least one character always goes into the head so layout makes progress.
    width, cut = 0, 0
    for i, ch in enumerate(word):
        width += glyphs.advance(ch)
        if width > budget_px and i > 0:
            break
        cut = i + 1
    return word[:cut], word[cut:]


def layout_runs(text: str, budget_px: int, glyphs: GlyphSet) -> list[str]:
    """Greedily pack the words of ``text`` into runs no wider than ``budget_px``.

    A word wider than the whole budget is broken at character granularity.
    """
    words = text.split()
    runs = []
    while words:
        k = fit_words(words, budget_px, glyphs)
        if k == 0:
            head, tail = _split_word(words[0], budget_px, glyphs)
            runs.append(head)
            words = [tail, *words[1:]] if tail else words[1:]
        else:
            runs.append(" ".join(words[:k]))
            words = words[k:]
    return runs


def _ink_run(text: str, cfg: RenderConfig, glyphs: GlyphSet) -> np.ndarray:
    """Boolean ink mask of one run, trimmed to whole patches ending at the last inked column."""
    width = cfg.padding_px + measure_text(text, glyphs)
    ink = np.zeros((cfg.height_px, width), dtype=bool)
    x = cfg.padding_px
    for ch in text:
        bm = glyphs.glyph(ch)
        ink[:, x:x + bm.shape[1]] = bm
        x += bm.shape[1]
    cols = np.flatnonzero(ink.any(axis=0))
    n = 0 if cols.size == 0 else int(cols[-1]) // cfg.patch_px + 1
    out = np.zeros((cfg.height_px, n * cfg.patch_px), dtype=bool)
    out[:, :min(width, out.shape[1])] = ink[:, :out.shape[1]]
    return out


def _assemble(runs: list[np.ndarray], cfg: RenderConfig) -> RenderedStrip:
    """Place runs left to right, each followed by a black patch, then pad with white."""
    P = cfg.patch_px
    needed = sum(r.shape[1] // P + 1 for r in runs)
    if needed > cfg.max_patches:
        raise RenderOverflow(f"content needs {needed} patches, strip holds {cfg.max_patches}")
    pixels = np.empty((cfg.height_px, cfg.width_px, cfg.channels), dtype=np.uint8)
    pixels[:] = np.asarray(cfg.background, dtype=np.uint8)
    roles = np.full(cfg.max_patches, Role.PAD, dtype=np.uint8)
    color = np.asarray(cfg.font_color, dtype=np.uint8)
    patch = 0
    for ink in runs:
        n = ink.shape[1] // P
        region = pixels[:, patch * P:(patch + n) * P]
        region[ink] = color
        roles[patch:patch + n] = Role.CONTENT
        patch += n
        pixels[:, patch * P:(patch + 1) * P] = 0
        roles[patch] = Role.EOS
        patch += 1
    return RenderedStrip(pixels, patch, roles)


def render_text(text: str, cfg: RenderConfig | None = None, glyphs: GlyphSet | None = None) -> RenderedStrip:
    cfg = cfg or RenderConfig()
    glyphs = glyphs or default_glyphs()
    line = " ".join(text.split())
    if measure_text(line, glyphs) > cfg.content_budget_px:
        raise RenderOverflow(
            f"text is {measure_text(line, glyphs)} px wide, budget is {cfg.content_budget_px} px"
        )
    return _assemble([_ink_run(line, cfg, glyphs)], cfg)


def render_pair(seg_a: str, seg_b: str, cfg: RenderConfig | None = None,
                glyphs: GlyphSet | None = None) -> RenderedStrip:
    cfg = cfg or RenderConfig()
    glyphs = glyphs or default_glyphs()
    runs = [_ink_run(" ".join(s.split()), cfg, glyphs) for s in (seg_a, seg_b)]
    return _assemble(runs, cfg)


def truncate_or_segment(text: str, cfg: RenderConfig | None = None, glyphs: GlyphSet | None = None,
                        mode: str = "segment") -> list[RenderedStrip]:
    """Render text of any length.

    ``truncate`` keeps only the first run (the longest word-aligned prefix that
    fits); ``segment`` emits one strip per run so every word is rendered.
    """
    if mode not in ("truncate", "segment"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = cfg or RenderConfig()
    glyphs = glyphs or default_glyphs()
    runs = layout_runs(text, cfg.content_budget_px, glyphs)
    if len(runs) <= 1:
        return [render_text(text, cfg, glyphs)]
    if mode == "truncate":
        runs = runs[:1]
    return [_assemble([_ink_run(r, cfg, glyphs)], cfg) for r in runs]


_STRIP_MAGIC = b"PXSTRIP1"


def write_strip(path: str | Path, pixels: np.ndarray) -> None:
    """Raw dump: 16-byte header (magic, u32 height, u32 width, little-endian) then rows."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(_STRIP_MAGIC + struct.pack("<II", pixels.shape[0], pixels.shape[1]))
        fh.write(pixels.tobytes())


def read_strip(path: str | Path, channels: int = 3) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != _STRIP_MAGIC or len(data) < 16:
        raise ShapeError(f"{path}: not a strip dump")
    h, w = struct.unpack("<II", data[8:16])
    body = np.frombuffer(data, dtype=np.uint8, offset=16)
    if body.size != h * w * channels:
        raise ShapeError(f"{path}: expected {h * w * channels} pixel bytes, found {body.size}")
    return body.reshape(h, w, channels).copy()
