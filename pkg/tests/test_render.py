import numpy as np
import pytest
from hypothesis import given, strategies as st

from pixeltext.errors import RenderOverflow
from pixeltext.font import GlyphSet, default_glyphs
from pixeltext.patchio import classify_patches, patchify
from pixeltext.render import (RenderConfig, Role, fit_words, layout_runs, measure_text, read_strip, render_pair,
                              render_text, truncate_or_segment, write_strip)

from conftest import DATA, random_ascii

ascii_words = st.lists(st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E), min_size=1, max_size=12),
                       max_size=30)


def linear_fit(words, budget, glyphs):
    best = 0
    for k in range(1, len(words) + 1):
        if measure_text(" ".join(words[:k]), glyphs) <= budget:
            best = k
    return best


def test_default_config_geometry():
    cfg = RenderConfig()
    assert (cfg.height_px, cfg.patch_px, cfg.channels, cfg.padding_px) == (16, 16, 3, 3)
    assert cfg.width_px == 16384
    assert cfg.dpi == 120 and cfg.font_size == 8
    assert cfg.background == (255, 255, 255) and cfg.font_color == (0, 0, 0)


def test_config_rejects_mismatched_patch_height():
    with pytest.raises(ValueError):
        RenderConfig(height_px=16, patch_px=8)


def test_every_printable_ascii_glyph_present(glyphs):
    for c in range(0x20, 0x7F):
        assert chr(c) in glyphs
        assert glyphs.advance(chr(c)) >= 1
        assert glyphs.glyph(chr(c)).shape == (16, glyphs.advance(chr(c)))


def test_unmapped_character_uses_replacement(glyphs):
    assert "中" not in glyphs
    assert np.array_equal(glyphs.glyph("中"), glyphs.replacement)
    assert measure_text("中", glyphs) == glyphs.replacement.shape[1]


def test_glyph_ink_reaches_near_every_cell_edge(glyphs):
    # Needed so that no content patch can come out all white.
    for c in range(0x21, 0x7F):
        cols = np.flatnonzero(glyphs.glyph(chr(c)).any(axis=0))
        assert cols.size and cols[0] <= 3 and cols[-1] >= 4


@pytest.mark.parametrize("text,expected", [("", 0), ("aaa", 24), ("a b", 24)])
def test_measure_text(glyphs, text, expected):
    assert measure_text(text, glyphs) == expected


def test_fit_words_examples(glyphs):
    assert fit_words([], 100, glyphs) == 0
    assert fit_words(["aa", "bb", "cc"], 35, glyphs) == 1
    assert fit_words(["aaaaa"], 8, glyphs) == 0
    assert fit_words(["aa", "bb", "cc"], 64, glyphs) == 3


def test_fit_words_negative_budget(glyphs):
    with pytest.raises(ValueError):
        fit_words(["a"], -1, glyphs)


@given(ascii_words, st.integers(0, 400))
def test_fit_words_matches_linear_scan(words, budget):
    g = default_glyphs()
    assert fit_words(words, budget, g) == linear_fit(words, budget, g)


def test_fit_words_with_proportional_backend():
    widths = {"i": 3, "m": 11, " ": 4}
    bitmaps = {ch: np.ones((16, w), bool) for ch, w in widths.items()}
    g = GlyphSet(bitmaps, np.ones((16, 5), bool), font_id="test")
    rng = np.random.default_rng(0)
    for _ in range(300):
        words = ["".join(rng.choice(["i", "m"], size=rng.integers(1, 5))) for _ in range(rng.integers(0, 12))]
        budget = int(rng.integers(0, 120))
        assert fit_words(words, budget, g) == linear_fit(words, budget, g)


def test_empty_text_is_lone_eos():
    s = render_text("")
    assert s.used_patches == 1
    assert s.patch_roles[0] == Role.EOS
    assert (s.patch_roles[1:] == Role.PAD).all()
    assert (s.pixels[:, :16] == 0).all() and (s.pixels[:, 16:] == 255).all()


def test_whitespace_only_equals_empty():
    assert np.array_equal(render_text(" \n\t ").pixels, render_text("").pixels)


def test_default_strip_shape():
    s = render_text("hello world")
    assert s.pixels.shape == (16, 16384, 3) and s.pixels.dtype == np.uint8
    assert s.n_patches == 1024


def test_letter_a_matches_golden():
    golden = read_strip(DATA / "a.strip")
    s = render_text("a")
    assert np.array_equal(s.pixels[:, :golden.shape[1]], golden)
    assert (s.pixels[:, golden.shape[1]:] == 255).all()
    ink_cols = np.flatnonzero((s.pixels[:, :16] == 0).any(axis=(0, 2)))
    assert ink_cols.min() >= 3 and ink_cols.max() <= 10
    assert list(s.patch_roles[:3]) == [Role.CONTENT, Role.EOS, Role.PAD]


def test_pair_matches_golden():
    golden = read_strip(DATA / "pair_ab.strip")
    s = render_pair("a", "b")
    assert np.array_equal(s.pixels[:, :golden.shape[1]], golden)
    assert list(s.patch_roles[:5]) == [Role.CONTENT, Role.EOS, Role.CONTENT, Role.EOS, Role.PAD]
    assert np.array_equal(classify_patches(patchify(s).patches), s.patch_roles)


def test_empty_pair():
    s = render_pair("", "")
    assert list(s.patch_roles[:3]) == [Role.EOS, Role.EOS, Role.PAD]
    assert s.used_patches == 2


def test_pair_overflow():
    cfg = RenderConfig(max_patches=8)
    # Each segment below needs 3 content patches; 3 + 1 + 3 + 1 = 8 fits, one more char does not.
    a = "a" * 5
    assert render_pair(a, a, cfg).used_patches == 8
    with pytest.raises(RenderOverflow):
        render_pair(a, a + " b" * 2, cfg)


def test_render_text_overflow():
    cfg = RenderConfig(max_patches=4)
    render_text("a" * 5, cfg)
    with pytest.raises(RenderOverflow):
        render_text("a" * 6, cfg)


def test_strip_invariants_on_random_documents(rng):
    cfg = RenderConfig(max_patches=64)
    for _ in range(30):
        text = random_ascii(rng, int(rng.integers(0, 12)))
        s = render_text(text, cfg)
        last_eos = int(np.flatnonzero(s.patch_roles == Role.EOS)[-1])
        assert s.used_patches == last_eos + 1
        blocks = s.pixels.reshape(16, 64, 16, 3).transpose(1, 0, 2, 3)
        assert (blocks[s.patch_roles == Role.EOS] == 0).all()
        assert (blocks[last_eos + 1:] == 255).all()
        assert set(np.unique(s.pixels)) <= {0, 255}


def test_truncate_short_text_identical_to_render():
    for mode in ("truncate", "segment"):
        out = truncate_or_segment("short text", mode=mode)
        assert len(out) == 1
        assert np.array_equal(out[0].pixels, render_text("short text").pixels)


def test_truncate_fills_strip():
    text = " ".join(["a"] * 3000)
    (strip,) = truncate_or_segment(text, mode="truncate")
    assert strip.used_patches == 1024


def long_text(n_words=1600, seed=7):
    return random_ascii(np.random.default_rng(seed), n_words, max_len=8)


def test_segment_covers_all_words_in_order():
    text = long_text()
    strips = truncate_or_segment(text, mode="segment")
    assert len(strips) >= 2
    assert sum(s.content_patches for s in strips) >= 1900
    cfg = RenderConfig()
    runs = layout_runs(text, cfg.content_budget_px, default_glyphs())
    assert " ".join(runs).split() == text.split()
    assert len(runs) == len(strips)
    for s in strips:
        assert s.used_patches <= cfg.max_patches


def test_segment_content_equals_single_pass_line_rendering():
    text = long_text()
    cfg = RenderConfig()
    glyphs = default_glyphs()
    strips = truncate_or_segment(text, cfg, mode="segment")
    runs = layout_runs(text, cfg.content_budget_px, glyphs)
    wide = RenderConfig(max_patches=4096)
    for s, run in zip(strips, runs):
        ref = render_text(run, wide, glyphs)
        n = s.content_patches
        assert ref.content_patches == n
        assert np.array_equal(s.pixels[:, :n * 16], ref.pixels[:, :n * 16])


def test_overlong_word_is_hard_broken():
    cfg = RenderConfig(max_patches=4)
    strips = truncate_or_segment("x" * 20, cfg, mode="segment")
    assert len(strips) > 1
    assert sum(measure_text(r, default_glyphs()) for r in layout_runs("x" * 20, cfg.content_budget_px,
                                                                           default_glyphs())) == 160


def test_determinism(rng):
    text = random_ascii(rng, 50)
    assert render_text(text).pixels.tobytes() == render_text(text).pixels.tobytes()


def test_strip_file_round_trip(tmp_path):
    s = render_text("round trip")
    write_strip(tmp_path / "s.strip", s.pixels)
    raw = (tmp_path / "s.strip").read_bytes()
    assert raw[:8] == b"PXSTRIP1" and len(raw) == 16 + s.pixels.size
    assert np.array_equal(read_strip(tmp_path / "s.strip"), s.pixels)


def test_custom_colours():
    cfg = RenderConfig(background=(10, 20, 30), font_color=(200, 100, 50), max_patches=8)
    s = render_text("A", cfg)
    colours = {tuple(p) for p in s.pixels[:, :16].reshape(-1, 3)}
    assert colours == {(10, 20, 30), (200, 100, 50)}
