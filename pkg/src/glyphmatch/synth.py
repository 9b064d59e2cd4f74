"""Procedural glyph fonts, text-line rendering and training-time augmentation.

Letters of the Latin alphabet share one stroke skeleton per character across
all fonts; each font perturbs the skeleton, its proportions and widths.
Random alphabets draw skeletons from a separate namespace, so their glyphs
never coincide with Latin ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .rng import Prng, derive_seed

GLYPH_HEIGHT = 32
MIN_WIDTH, MAX_WIDTH = 12, 28
PEN = 2
MIN_INK = 40
STYLES = ("regular", "bold", "light", "italic", "other")
STYLE_CODES = {"R": "regular", "B": "bold", "L": "light", "I": "italic", "O": "other"}
TRAIN_STYLES = ("regular", "bold", "light", "italic")
LATIN = "abcdefghijklmnopqrstuvwxyz"
DEFAULT_ALPHABET = LATIN + " "
RANDOM_ALPHABET_TARGETS = LATIN + ".,'-"


@dataclass
class FontAtlas:
    font_id: str
    style: str
    glyphs: dict  # char -> float32 array, GLYPH_HEIGHT x even width

    @property
    def alphabet(self) -> list:
        return list(self.glyphs)

    def width(self, char: str) -> int:
        return self.glyphs[char].shape[1]

    def __contains__(self, char) -> bool:
        return char in self.glyphs


@dataclass
class TextLineSample:
    image: np.ndarray  # GLYPH_HEIGHT x W, W even
    text: str
    boxes: list  # per character (x_start, x_end)
    font_id: str = ""

    @property
    def width(self) -> int:
        return self.image.shape[1]


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to multiples of 1/255 so PGM round trips are lossless."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _even(w: int) -> int:
    return w + (w % 2)


# -- stroke skeletons ----------------------------------------------------------
def _skeleton(namespace: str, char: str) -> tuple:
    """Strokes (lists of unit-square points) and a nominal width for one symbol."""
    prng = Prng(derive_seed("skeleton", namespace, char))
    strokes = []
    for _ in range(2 + prng.randint(0, 4)):
        if prng.random() < 0.35:
            cx, cy = prng.uniform(0.3, 0.7), prng.uniform(0.3, 0.7)
            r = prng.uniform(0.2, 0.45)
            a0 = prng.uniform(0, 2 * math.pi)
            sweep = prng.uniform(math.pi / 2, 2 * math.pi)
            ts = np.linspace(a0, a0 + sweep, 9)
            pts = [(cx + r * math.cos(t), cy + r * math.sin(t)) for t in ts]
        else:
            pts = [(prng.random(), prng.random()) for _ in range(2 + prng.randint(0, 3))]
        strokes.append([(min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)) for x, y in pts])
    width = prng.uniform(14, 24)
    return strokes, width


def _draw(canvas: np.ndarray, pts: np.ndarray) -> None:
    """Stamp a PEN x PEN square pen densely along a polyline (pixel coords)."""
    h, w = canvas.shape
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        n = max(2, int(math.hypot(x1 - x0, y1 - y0) * 4) + 1)
        xs = np.linspace(x0, x1, n)
        ys = np.linspace(y0, y1, n)
        cols = np.floor(xs - PEN / 2 + 0.5).astype(int)
        rows = np.floor(ys - PEN / 2 + 0.5).astype(int)
        for dy in range(PEN):
            for dx in range(PEN):
                r = np.clip(rows + dy, 0, h - 1)
                c = np.clip(cols + dx, 0, w - 1)
                canvas[r, c] = 1.0


def _render_glyph(strokes, width: int, prng: Prng, jitter: float, top: float, bottom: float) -> np.ndarray:
    canvas = np.zeros((GLYPH_HEIGHT, width), np.float32)
    left, right = 2.0, width - 3.0
    for stroke in strokes:
        pts = np.array(stroke, dtype=np.float64)
        pts = pts + prng.uniform(-jitter, jitter, pts.shape)
        pts = np.clip(pts, 0.0, 1.0)
        px = left + pts[:, 0] * (right - left)
        py = top + pts[:, 1] * (bottom - top)
        _draw(canvas, np.stack([px, py], axis=1))
    return canvas


def _font_glyphs(namespace: str, seed: int, symbols: Sequence[str], keys: Sequence[str]) -> dict:
    fprng = Prng(derive_seed("font", namespace, seed))
    scale = fprng.uniform(0.85, 1.15)
    jitter = fprng.uniform(0.02, 0.07)
    top = fprng.uniform(4.0, 8.0)
    bottom = fprng.uniform(24.0, 28.0)
    space_width = 12 + 2 * fprng.randint(0, 3)
    glyphs = {}
    for sym, key in zip(symbols, keys):
        if key == " ":
            glyphs[key] = np.zeros((GLYPH_HEIGHT, space_width), np.float32)
            continue
        strokes, nominal = _skeleton(namespace, sym)
        cprng = fprng.spawn("glyph", sym)
        w = int(round(nominal * scale + cprng.uniform(-2, 2)))
        w = min(max(_even(w), MIN_WIDTH), MAX_WIDTH)
        img = _render_glyph(strokes, w, cprng, jitter, top, bottom)
        extra = 0
        while img.sum() < MIN_INK:  # top up degenerate glyphs with extra strokes
            extra_strokes, _ = _skeleton(namespace, f"{sym}#extra{extra}")
            img = np.maximum(img, _render_glyph(extra_strokes[:1], w, cprng, jitter, top, bottom))
            extra += 1
        glyphs[key] = quantize(img)
    return glyphs


def gen_font(seed: int, alphabet: Sequence[str] = DEFAULT_ALPHABET, font_id: Optional[str] = None) -> FontAtlas:
    """Regular-style Latin font; a pure function of ``seed`` and ``alphabet``."""
    alphabet = list(alphabet)
    if not alphabet:
        raise ValueError("alphabet must not be empty")
    glyphs = _font_glyphs("latin", seed, alphabet, alphabet)
    return FontAtlas(font_id or f"font-{seed}", "regular", glyphs)


def gen_random_alphabet_font(seed: int, size: int = 26, with_space: bool = True) -> tuple:
    """Novel-script font whose ``size`` symbols stand in for Latin characters.

    Returns ``(atlas, mapping)`` where ``mapping[i]`` is the character that
    symbol ``i`` renders; the atlas is keyed by those characters.
    """
    if not 1 <= size <= len(RANDOM_ALPHABET_TARGETS):
        raise ValueError(f"size must be in [1, {len(RANDOM_ALPHABET_TARGETS)}]")
    targets = list(RANDOM_ALPHABET_TARGETS[:size])
    symbols = [f"sym{i}" for i in range(size)]
    keys = list(targets)
    if with_space:
        symbols.append(" ")
        keys.append(" ")
    glyphs = _font_glyphs(f"novel:{seed}", seed, symbols, keys)
    return FontAtlas(f"alpha-{seed}", "other", glyphs), dict(enumerate(targets))


# -- style transforms -----------------------------------------------------------
def _shift_stack(img: np.ndarray, offsets) -> list:
    h, w = img.shape
    pad = np.pad(img, 1)
    return [pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in offsets]


def dilate(img: np.ndarray) -> np.ndarray:
    """3x3 grayscale dilation (max filter)."""
    return np.max(_shift_stack(img, [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]), axis=0)


def erode_thin(img: np.ndarray) -> np.ndarray:
    """2x2 grayscale erosion: thins a 2 px stroke to 1 px without erasing it."""
    return np.min(_shift_stack(img, [(0, 0), (0, 1), (1, 0), (1, 1)]), axis=0)


def shear(img: np.ndarray, factor: float = 0.25, baseline: Optional[int] = None) -> np.ndarray:
    """Shift each row right by round(factor * rows above the baseline)."""
    h, w = img.shape
    baseline = h - 1 if baseline is None else baseline
    shifts = [int(round(factor * (baseline - r))) for r in range(h)]
    lo = min(0, min(shifts))
    hi = max(shifts) - lo
    out = np.zeros((h, _even(w + hi)), img.dtype)
    for r, s in enumerate(shifts):
        out[r, s - lo : s - lo + w] = img[r]
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the glyph centre, same canvas size."""
    h, w = img.shape
    th = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = math.cos(th) * (xx - cx) + math.sin(th) * (yy - cy) + cx
    sy = -math.sin(th) * (xx - cx) + math.cos(th) * (yy - cy) + cy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    pad = np.pad(img, 1)

    def at(yi, xi):
        return pad[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)]

    out = (
        at(y0, x0) * (1 - fx) * (1 - fy)
        + at(y0, x0 + 1) * fx * (1 - fy)
        + at(y0 + 1, x0) * (1 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
    )
    return out.astype(np.float32)


def apply_style(font: FontAtlas, style: str, seed: Optional[int] = None) -> FontAtlas:
    """Restyle every glyph; ``other`` adds random rotation and stroke jitter."""
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    if style == "regular":
        return replace(font, style="regular", glyphs=dict(font.glyphs))
    prng = Prng(derive_seed("style", font.font_id, style, 0 if seed is None else seed))
    glyphs = {}
    for ch, img in font.glyphs.items():
        if ch == " ":
            glyphs[ch] = img.copy()
            continue
        if style == "bold":
            out = dilate(img)
        elif style == "light":
            out = erode_thin(img)
        elif style == "italic":
            out = shear(img)
        else:
            out = rotate(img, prng.uniform(-3.0, 3.0))
            pick = prng.random()
            out = dilate(out) if pick < 0.3 else (erode_thin(out) if pick < 0.5 else out)
            if out.sum() < MIN_INK / 2:
                out = rotate(img, 0.0)
        glyphs[ch] = quantize(out)
    return FontAtlas(font.font_id, style, glyphs)


# -- rendering -----------------------------------------------------------------
def render_line(font: FontAtlas, text: str, inter_char_gap: int = 0) -> TextLineSample:
    """Concatenate glyphs for ``text``; boxes tile the image exactly."""
    if not text:
        raise ValueError("cannot render empty text")
    parts, boxes, x = [], [], 0
    for i, ch in enumerate(text):
        g = font.glyphs.get(ch)
        if g is None:
            raise KeyError(f"font {font.font_id!r} has no glyph for {ch!r}")
        gap = inter_char_gap if i < len(text) - 1 else 0
        parts.append(g)
        if gap:
            parts.append(np.zeros((GLYPH_HEIGHT, gap), np.float32))
        boxes.append([x, x + g.shape[1] + gap])
        x += g.shape[1] + gap
    image = np.concatenate(parts, axis=1)
    if image.shape[1] % 2:
        image = np.pad(image, ((0, 0), (0, 1)))
        boxes[-1][1] += 1
    return TextLineSample(image.astype(np.float32), text, [tuple(b) for b in boxes], font.font_id)


# -- augmentation ----------------------------------------------------------------
@dataclass(frozen=True)
class AugmentParams:
    dx: int = 0
    dy: int = 0
    crop_left: int = 0
    crop_right: int = 0
    contrast: float = 1.0
    blur: int = 1

    @classmethod
    def from_uniforms(cls, u: Sequence[float]) -> "AugmentParams":
        """Map six draws in [0, 1) to parameters; all-0.5 is the identity."""
        return cls(
            dx=int(round((u[0] - 0.5) * 4.999)),
            dy=int(round((u[1] - 0.5) * 4.999)),
            crop_left=max(0, int(round((u[2] - 0.5) * 8.999))),
            crop_right=max(0, int(round((u[3] - 0.5) * 8.999))),
            contrast=0.7 + 0.6 * u[4],
            blur=3 if u[5] >= 0.75 else 1,
        )


def _reflow_boxes(boxes, shift: int, width: int) -> list:
    out = []
    for a, b in boxes:
        out.append([min(max(a + shift, 0), width), min(max(b + shift, 0), width)])
    out[0][0] = 0
    out[-1][1] = width
    for i in range(1, len(out)):  # keep the tiling contiguous after clamping
        out[i][0] = out[i - 1][1] = max(out[i - 1][0], min(out[i - 1][1], out[i][1]))
    return [tuple(b) for b in out]


def apply_augment(sample: TextLineSample, p: AugmentParams) -> TextLineSample:
    img = sample.image
    h, w = img.shape
    boxes = list(sample.boxes)
    if p.dx or p.dy:
        shifted = np.zeros_like(img)
        ys = slice(max(p.dy, 0), h + min(p.dy, 0))
        yd = slice(max(-p.dy, 0), h + min(-p.dy, 0))
        xs = slice(max(p.dx, 0), w + min(p.dx, 0))
        xd = slice(max(-p.dx, 0), w + min(-p.dx, 0))
        shifted[ys, xs] = img[yd, xd]
        img = shifted
        boxes = _reflow_boxes(boxes, p.dx, w)
    # never crop into the first/last glyph beyond a 2 px margin of its box
    cl = min(p.crop_left, max(0, boxes[0][1] - boxes[0][0] - 2))
    cr = min(p.crop_right, max(0, boxes[-1][1] - boxes[-1][0] - 2))
    if (cl + cr) % 2:
        cr = cr - 1 if cr > 0 else cr + 1
    if cl or cr:
        img = img[:, cl : w - cr]
        boxes = _reflow_boxes(boxes, -cl, img.shape[1])
    if p.blur == 3:
        pad = np.pad(img, 1, mode="edge")
        img = sum(pad[a : a + img.shape[0], b : b + img.shape[1]] for a in range(3) for b in range(3)) / 9.0
    if p.contrast != 1.0:
        img = (img - 0.5) * p.contrast + 0.5
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return TextLineSample(img, sample.text, boxes, sample.font_id)


def augment(sample: TextLineSample, seed: int) -> TextLineSample:
    prng = Prng(derive_seed("augment", seed))
    return apply_augment(sample, AugmentParams.from_uniforms([prng.random() for _ in range(6)]))


# -- dataset splits ----------------------------------------------------------------
@dataclass
class FontSplits:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def ids(self, which: str = "train") -> list:
        return [f.font_id for f in getattr(self, which)]


def styled_font(style: str, index: int, seed: int, alphabet: Sequence[str] = DEFAULT_ALPHABET) -> FontAtlas:
    code = {v: k for k, v in STYLE_CODES.items()}[style]
    font_seed = derive_seed("split", seed, style, index) & 0xFFFFFFFF
    base = gen_font(font_seed, alphabet, font_id=f"{code}{index:03d}")
    return apply_style(base, style, seed=font_seed)


def make_splits(
    n_fonts_per_style: int,
    seed: int,
    styles: Sequence[str] = TRAIN_STYLES,
    n_test_fonts: int = 5,
    alphabet: Sequence[str] = DEFAULT_ALPHABET,
) -> FontSplits:
    """Disjoint training fonts per style plus held-out ``other``-style test fonts."""
    if n_fonts_per_style < 1:
        raise ValueError("need at least one font per style")
    for s in styles:
        if s not in TRAIN_STYLES:
            raise ValueError(f"training style must be one of {TRAIN_STYLES}, got {s!r}")
    train = [styled_font(s, i, seed, alphabet) for s in styles for i in range(n_fonts_per_style)]
    test = [styled_font("other", i, seed, alphabet) for i in range(n_test_fonts)]
    return FontSplits(train, test)


# -- text sampling -----------------------------------------------------------------
def sample_text(prng: Prng, sentences: Sequence[str], max_len: int = 24, min_len: int = 4) -> str:
    """A word-aligned window of at most ``max_len`` characters from the corpus."""
    for _ in range(100):
        words = prng.choice(sentences).split()
        if not words:
            continue
        target = prng.randint(min_len, max_len + 1)
        start = prng.randint(0, len(words))
        out = words[start][:max_len]
        for wd in words[start + 1 :]:
            if len(out) + 1 + len(wd) > target:
                break
            out += " " + wd
        if len(out) >= min(min_len, 2):
            return out
    raise ValueError("could not sample text from corpus")
