import numpy as np
import pytest

from glyphmatch.storage import (
    iter_dataset, load_font, load_fonts, read_gt, read_pgm, read_texts, save_font, write_dataset, write_pgm,
)
from glyphmatch.synth import apply_style, augment, gen_font, quantize, render_line


@pytest.fixture(scope="module")
def font():
    return apply_style(gen_font(4), "italic")


class TestPgm:
    def test_round_trip_is_lossless_for_quantised_images(self, tmp_path, rng):
        img = quantize(rng.random((32, 18)))
        write_pgm(tmp_path / "x.pgm", img)
        out = read_pgm(tmp_path / "x.pgm")
        assert out.dtype == np.float32 and np.array_equal(out, img)

    def test_header(self, tmp_path):
        write_pgm(tmp_path / "x.pgm", np.ones((2, 3)))
        assert (tmp_path / "x.pgm").read_bytes() == b"P5\n3 2\n255\n" + b"\xff" * 6

    def test_comment_in_header_accepted(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        assert read_pgm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]

    def test_rejects_ascii_and_truncated(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        for name in ("a.pgm", "t.pgm"):
            with pytest.raises(ValueError):
                read_pgm(tmp_path / name)


class TestFontDirectory:
    def test_round_trip(self, tmp_path, font):
        save_font(tmp_path / "f", font)
        back = load_font(tmp_path / "f")
        assert (back.font_id, back.style) == (font.font_id, font.style)
        assert list(back.glyphs) == list(font.glyphs)
        for ch in font.glyphs:
            assert np.array_equal(back.glyphs[ch], font.glyphs[ch])

    def test_manifest_lists_codepoints(self, tmp_path, font):
        save_font(tmp_path / "f", font)
        lines = (tmp_path / "f" / "font.manifest").read_text().splitlines()
        assert lines[0] == f"FONT 1 italic {font.font_id}"
        assert f"glyph 20 {font.width(' ')} 0020.pgm" in lines

    def test_width_mismatch_detected(self, tmp_path, font):
        save_font(tmp_path / "f", font)
        m = tmp_path / "f" / "font.manifest"
        m.write_text(m.read_text().replace("glyph 61 ", "glyph 61 2").replace("glyph 61 2", "glyph 61 99", 1))
        with pytest.raises(ValueError, match="width"):
            load_font(tmp_path / "f")

    def test_load_fonts_sorted(self, tmp_path):
        for seed in (3, 1):
            save_font(tmp_path / f"font{seed}", gen_font(seed))
        (tmp_path / "junk").mkdir()
        assert [f.font_id for f in load_fonts(tmp_path)] == ["font-1", "font-3"]
        assert load_fonts(tmp_path / "missing") == []


class TestDataset:
    def test_round_trip(self, tmp_path, font):
        samples = [augment(render_line(font, t), i) for i, t in enumerate(["abc", "hello there", "zz top"])]
        assert write_dataset(tmp_path / font.font_id, samples) == 3
        back = list(iter_dataset(tmp_path / font.font_id))
        assert [sid for sid, _ in back] == [f"{font.font_id}/00000{i}" for i in range(3)]
        for s, (_, b) in zip(samples, back):
            assert b.text == s.text and b.boxes == s.boxes
            np.testing.assert_array_equal(b.image, quantize(s.image))
        assert read_texts(tmp_path) == ["abc", "hello there", "zz top"]

    def test_box_count_checked(self, tmp_path):
        (tmp_path / "x.gt").write_text("ab\n61 0 4\n")
        with pytest.raises(ValueError):
            read_gt(tmp_path / "x.gt")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            list(iter_dataset(tmp_path / "nope"))
