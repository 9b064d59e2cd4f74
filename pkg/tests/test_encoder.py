import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glyphmatch.encoder import (
    FEATURE_DIM, GLYPH_LINE_WIDTH, PAD, GlyphLine, build_glyph_line, encode, encode_trace, init_encoder,
    similarity_map,
)
from glyphmatch.rng import Prng
from glyphmatch.synth import FontAtlas
from glyphmatch.tensor import Tensor

ARCHITECTURE = {  # layer -> (H, W divisor, channels)
    "conv1": (16, 2, 64),
    "resBlock1": (8, 2, 64),
    "resBlock2": (4, 4, 128),
    "upsample": (8, 2, 128),
    "skip": (8, 2, 128),
    "pool": (4, 2, 128),
    "conv2": (4, 2, 64),
}


@pytest.fixture(scope="module")
def params():
    return init_encoder(Prng(3))


def font_with_widths(widths, chars=None):
    chars = chars or [chr(ord("a") + i) for i in range(len(widths))]
    glyphs = {}
    for i, (c, w) in enumerate(zip(chars, widths)):
        g = np.zeros((32, w), np.float32)
        g[8 + i % 10 : 20, 2 : w - 2] = 1.0
        glyphs[c] = g
    return FontAtlas("test", "regular", glyphs)


class TestEncoderTrace:
    @pytest.mark.parametrize("width", [8, 16, 64, 256, 720])
    def test_output_sizes_follow_architecture_table(self, params, width):
        img = np.zeros((32, width), np.float32)
        trace = dict(encode_trace(params, img))
        for layer, (h, div, c) in ARCHITECTURE.items():
            assert trace[layer].shape == (1, h, width // div, c), layer
        assert trace["reshape"].shape == (1, width // 2, FEATURE_DIM)

    def test_glyph_line_width_gives_360_rows(self, params):
        assert encode(params, np.zeros((32, GLYPH_LINE_WIDTH), np.float32)).shape == (360, 256)

    def test_width_not_divisible_by_four(self, params):
        assert encode(params, np.zeros((32, 10), np.float32)).shape == (5, 256)

    def test_channel_counts(self, params):
        assert params["enc.conv1.weight"].shape == (64, 1, 3, 3)
        assert params["enc.res1.conv_a.weight"].shape == (64, 64, 3, 3)
        assert params["enc.res2.conv_a.weight"].shape == (128, 64, 3, 3)
        assert params["enc.skip.weight"].shape == (128, 192, 3, 3)
        assert params["enc.conv2.weight"].shape == (64, 128, 1, 1)

    @pytest.mark.parametrize("shape,msg", [((31, 8), "height"), ((32, 7), "even"), ((32, 2), "even")])
    def test_bad_shapes_rejected(self, params, shape, msg):
        with pytest.raises(ValueError, match=msg):
            encode(params, np.zeros(shape, np.float32))

    def test_pixel_range_rejected(self, params):
        with pytest.raises(ValueError, match="range"):
            encode(params, np.full((32, 8), 1.5, np.float32))

    def test_deterministic_and_batch_consistent(self, params, rng):
        a = rng.random((32, 24)).astype(np.float32)
        b = rng.random((32, 24)).astype(np.float32)
        one = encode(params, a).data
        assert np.array_equal(one, encode(params, a.copy()).data)
        batch = encode(params, np.stack([a, b])).data
        np.testing.assert_allclose(batch[0], one, rtol=1e-5, atol=1e-6)

    def test_right_padding_leaves_distant_columns_unchanged(self, params, rng):
        img = rng.random((32, 64)).astype(np.float32)
        k = 48
        base = encode(params, img).data
        padded = encode(params, np.pad(img, ((0, 0), (0, k)))).data
        keep = base.shape[0] - k // 2
        np.testing.assert_allclose(padded[:keep], base[:keep], atol=1e-4)


class TestSimilarityMap:
    def test_against_float64_oracle(self, rng):
        g = rng.normal(size=(7, 256)).astype(np.float32)
        x = rng.normal(size=(5, 256)).astype(np.float32)
        gd, xd = g.astype(np.float64), x.astype(np.float64)
        ref = (gd @ xd.T) / np.linalg.norm(gd, axis=1)[:, None] / np.linalg.norm(xd, axis=1)[None, :]
        np.testing.assert_allclose(similarity_map(Tensor(g), Tensor(x)).data, ref, atol=1e-5)

    def test_self_similarity_diagonal(self, rng):
        f = rng.normal(size=(6, 256))
        s = similarity_map(Tensor(f), Tensor(f)).data
        np.testing.assert_allclose(np.diag(s), 1.0, rtol=1e-12)
        assert np.all(s.argmax(axis=0) == np.arange(6))

    def test_orthogonal_and_zero_columns(self):
        g = np.zeros((2, 4))
        g[0, 0] = 1.0
        x = np.zeros((2, 4))
        x[0, 1] = 3.0
        s = similarity_map(Tensor(g), Tensor(x)).data
        assert np.all(s == 0.0)

    def test_feature_dim_mismatch(self):
        with pytest.raises(ValueError):
            similarity_map(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 5))))

    @given(st.integers(0, 2**32 - 1))
    def test_entries_bounded(self, seed):
        r = np.random.default_rng(seed)
        g = r.normal(size=(4, 8)) * r.uniform(0, 100)
        x = r.normal(size=(3, 8)) * r.uniform(0, 100)
        s = similarity_map(Tensor(g), Tensor(x)).data
        assert np.all(np.abs(s) <= 1.0 + 1e-12)


class TestGlyphLine:
    def test_padding_to_720(self):
        gl = build_glyph_line(font_with_widths([20] * 27), [chr(ord("a") + i) for i in range(27)])
        assert gl.width == 720
        assert sum(gl.widths[:-1]) == 540
        assert gl.chars[-1] is PAD and gl.widths[-1] == 180 and gl.offsets[-1] == 540
        assert np.all(gl.image[:, 540:] == 0)

    def test_downsampling_halves_widths(self):
        widths = [24, 28, 20, 16] * 12  # sum 1056
        widths += [16] * 24  # 1440 total
        chars = [chr(0x100 + i) for i in range(len(widths))]
        gl = build_glyph_line(font_with_widths(widths, chars), chars)
        assert gl.width == 720
        assert gl.widths[:-1] == [w // 2 for w in widths]
        assert gl.widths[-1] == 0

    def test_offsets_abut(self):
        gl = build_glyph_line(font_with_widths([12, 14, 16]), "abc")
        assert gl.offsets == [0, 12, 26, 42]

    def test_spans_use_stride(self):
        gl = build_glyph_line(font_with_widths([12, 14]), "ab")
        assert gl.spans() == [(0, 6), (6, 13), (13, 360)]

    def test_empty_and_duplicate_alphabet_rejected(self):
        font = font_with_widths([12, 14])
        with pytest.raises(ValueError):
            build_glyph_line(font, [])
        with pytest.raises(ValueError):
            build_glyph_line(font, "aa")

    def test_missing_glyph_names_character(self):
        with pytest.raises(KeyError, match="'z'"):
            build_glyph_line(font_with_widths([12]), "az")

    def test_non_abutting_offsets_rejected(self):
        with pytest.raises(ValueError):
            GlyphLine(np.zeros((32, 40)), ["a", "b"], [10, 10], [0, 12])
