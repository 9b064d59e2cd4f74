"""Shared visual encoder, glyph-line assembly and cosine similarity maps.

Layer trace for a 32 x W grayscale input (H x W, channels):

    conv1      3x3   1/64     max (2,2)   16 x W/2
    resBlock1  3x3  64/64     max (2,1)    8 x W/2
    resBlock2  3x3  64/128    max (2,2)    4 x W/4
    upsample                  x2           8 x W/2
    skip       3x3 192/128                 8 x W/2
    pool                      avg (2,1)    4 x W/2
    conv2      1x1 128/64                  4 x W/2
    reshape        64x4 -> 256             1 x W/2
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .rng import Prng
from .tensor import Tensor

GLYPH_LINE_WIDTH = 720
LINE_HEIGHT = 32
STRIDE = 2
FEATURE_DIM = 256
PAD = None  # exemplar label of the glyph-line padding region

def glorot(prng: Prng, shape: tuple, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return prng.uniform(-a, a, shape).astype(dtype)


def init_encoder(prng: Prng, dtype=np.float32) -> dict:
    """Named encoder parameters, Glorot-uniform weights and zero biases."""
    p = {}

    def conv(name, cin, cout, k, bias):
        p[f"enc.{name}.weight"] = glorot(prng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
        if bias:
            p[f"enc.{name}.bias"] = np.zeros(cout, dtype)

    def norm(name, c):
        p[f"enc.{name}.gain"] = np.ones(c, dtype)
        p[f"enc.{name}.bias"] = np.zeros(c, dtype)

    conv("conv1", 1, 64, 3, True)
    for blk, (cin, cout) in (("res1", (64, 64)), ("res2", (64, 128))):
        conv(f"{blk}.conv_a", cin, cout, 3, False)
        norm(f"{blk}.norm_a", cout)
        conv(f"{blk}.conv_b", cout, cout, 3, False)
        norm(f"{blk}.norm_b", cout)
        if cin != cout:
            conv(f"{blk}.shortcut", cin, cout, 1, False)
    conv("skip", 192, 128, 3, True)
    conv("conv2", 128, 64, 1, True)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _residual_block(x: Tensor, p: dict, blk: str) -> Tensor:
    h = T.conv2d_nhwc(x, p[f"enc.{blk}.conv_a.weight"], padding=1)
    h = T.relu(T.layernorm(h, -1, p[f"enc.{blk}.norm_a.gain"], p[f"enc.{blk}.norm_a.bias"]))
    h = T.conv2d_nhwc(h, p[f"enc.{blk}.conv_b.weight"], padding=1)
    h = T.layernorm(h, -1, p[f"enc.{blk}.norm_b.gain"], p[f"enc.{blk}.norm_b.bias"])
    short = p.get(f"enc.{blk}.shortcut.weight")
    skip = x if short is None else T.conv2d_nhwc(x, short)
    return T.relu(h + skip)


def encode_trace(params: dict, images) -> list:
    """Run the encoder on an N x 32 x W batch.

    Returns (layer, tensor) pairs; intermediate tensors are channels-last
    (N x H x W x C), the final entry is N x W/2 x 256.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    n, h, w = x.shape
    if h != LINE_HEIGHT:
        raise ValueError(f"encoder input height must be {LINE_HEIGHT}, got {h}")
    if w % 2 or w < 4:
        raise ValueError(f"encoder input width must be even and >= 4, got {w}")
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")
    extra = w % 4  # resBlock2 halves W/2 again; pad two blank columns, crop later
    x = T.pad_right(x, extra).reshape(n, h, w + extra, 1)
    trace = []
    c1 = T.conv2d_nhwc(x, params["enc.conv1.weight"], params["enc.conv1.bias"], padding=1)
    c1 = T.maxpool2d_nhwc(T.relu(c1), (2, 2))
    trace.append(("conv1", c1))
    r1 = T.maxpool2d_nhwc(_residual_block(c1, params, "res1"), (2, 1))
    trace.append(("resBlock1", r1))
    r2 = T.maxpool2d_nhwc(_residual_block(r1, params, "res2"), (2, 2))
    trace.append(("resBlock2", r2))
    up = T.upsample_bilinear2_nhwc(r2)
    trace.append(("upsample", up))
    sk = T.conv2d_nhwc(T.concat([up, r1], axis=3), params["enc.skip.weight"], params["enc.skip.bias"], padding=1)
    sk = T.relu(sk)
    trace.append(("skip", sk))
    pooled = T.avgpool2d_nhwc(sk, (2, 1))
    trace.append(("pool", pooled))
    c2 = T.conv2d_nhwc(pooled, params["enc.conv2.weight"], params["enc.conv2.bias"])
    trace.append(("conv2", c2))
    wf = c2.shape[2]
    # stack the 4 remaining rows into channels: feature index = channel * 4 + row
    feats = T.transpose(c2, (0, 2, 3, 1)).reshape(n, wf, 64 * 4)
    if extra:
        feats = feats[:, : w // 2, :]
    trace.append(("reshape", feats))
    return trace


def encode(params: dict, image) -> Tensor:
    """Encode one 32 x W image into a W/2 x 256 feature matrix.

    A leading batch axis is accepted as well (N x 32 x W -> N x W/2 x 256).
    """
    single = (image.ndim if isinstance(image, Tensor) else np.ndim(image)) == 2
    feats = encode_trace(params, image)[-1][1]
    return feats[0] if single else feats


def similarity_map(glyph_features: Tensor, line_features: Tensor) -> Tensor:
    """Cosine similarity between every glyph-line and text-line feature column.

    Inputs are (W_g' x D) and (W' x D); the result is W_g' x W'.
    """
    if glyph_features.shape[-1] != line_features.shape[-1]:
        raise ValueError(
            f"feature dims differ: {glyph_features.shape[-1]} vs {line_features.shape[-1]}"
        )
    g = T.l2_normalize(glyph_features, axis=-1)
    x = T.l2_normalize(line_features, axis=-1)
    return T.matmul(g, T.transpose(x, (1, 0)) if x.ndim == 2 else T.transpose(x, (0, 2, 1)))


@dataclass
class GlyphLine:
    """Exemplar strip: glyph images side by side, padding region last."""

    image: np.ndarray  # LINE_HEIGHT x width
    chars: list  # exemplar labels in order; PAD (None) marks the padding region
    widths: list
    offsets: list

    def __post_init__(self):
        if len(self.chars) != len(self.widths) or len(self.widths) != len(self.offsets):
            raise ValueError("chars, widths and offsets must have equal length")
        for i in range(len(self.offsets) - 1):
            if self.offsets[i] + self.widths[i] != self.offsets[i + 1]:
                raise ValueError(f"exemplar {i} does not abut exemplar {i + 1}")
        labels = [c for c in self.chars]
        if len(set(labels)) != len(labels):
            raise ValueError("every exemplar label must appear exactly once")

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def feature_width(self) -> int:
        return self.width // STRIDE

    @property
    def alphabet(self) -> list:
        """Labels of real characters (padding excluded)."""
        return [c for c in self.chars if c is not PAD]

    def spans(self, stride: int = STRIDE) -> list:
        """Feature-row span [start, end) of every exemplar.

        Boundaries fall at ``offset // stride`` so a feature column straddling
        two glyphs belongs to the later one.
        """
        out = []
        for off, wid in zip(self.offsets, self.widths):
            out.append((off // stride, (off + wid) // stride))
        return out

    def index_of(self, char) -> int:
        return self.chars.index(char)


def build_glyph_line(font, alphabet: Sequence[str], width: int = GLYPH_LINE_WIDTH) -> GlyphLine:
    """Concatenate ``font`` glyphs in ``alphabet`` order into a fixed-width strip.

    Short strips are blank-padded at the end under the ``PAD`` label, which
    belongs to no class; long strips are bilinearly squeezed to ``width``.
    """
    alphabet = list(alphabet)
    if not alphabet:
        raise ValueError("alphabet must not be empty")
    if len(set(alphabet)) != len(alphabet):
        raise ValueError("alphabet contains duplicate characters")
    images = []
    for ch in alphabet:
        g = font.glyphs.get(ch)
        if g is None:
            raise KeyError(f"font {getattr(font, 'font_id', '?')!r} has no glyph for {ch!r}")
        images.append(g)
    widths = [g.shape[1] for g in images]
    total = sum(widths)
    strip = np.concatenate(images, axis=1).astype(np.float32)
    offsets = list(np.cumsum([0] + widths[:-1]).tolist())
    if total <= width:
        image = np.zeros((LINE_HEIGHT, width), np.float32)
        image[:, :total] = strip
        return GlyphLine(image, alphabet + [PAD], widths + [width - total], offsets + [total])
    image = T.resize_width_bilinear(strip, width).astype(np.float32)
    edges = [int(round(e * width / total)) for e in np.cumsum([0] + widths).tolist()]
    new_widths = [b - a for a, b in zip(edges[:-1], edges[1:])]
    return GlyphLine(image, alphabet + [PAD], new_widths + [0], edges[:-1] + [width])
