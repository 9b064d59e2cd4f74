"""Encoder and decoder wired together into one recognizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .ctc import beam_search, greedy_decode
from .decoder import DecoderConfig, DecoderOutput, class_log_probs, decode_map, init_decoder
from .encoder import GlyphLine, encode, init_encoder, similarity_map
from .rng import Prng
from .tensor import Tensor, no_grad


class Forward(NamedTuple):
    S: Tensor  # W_g' x W'
    decoded: DecoderOutput
    log_probs: Tensor  # W' x (len(glyph_line.alphabet) + 1)


def charset_of(glyph_line: GlyphLine) -> list:
    """Class labels in logit order; the boundary class is appended as ``None``."""
    return list(glyph_line.alphabet) + [None]


def encode_targets(text: str, glyph_line: GlyphLine) -> list:
    try:
        return [glyph_line.index_of(ch) for ch in text]
    except ValueError:
        missing = sorted({ch for ch in text if ch not in glyph_line.chars})
        raise KeyError(f"characters {missing!r} are not in the exemplar alphabet") from None


@dataclass
class GlyphMatcher:
    params: dict
    config: DecoderConfig = field(default_factory=DecoderConfig)

    @classmethod
    def create(cls, seed: int = 0, config: Optional[DecoderConfig] = None, dtype=np.float32) -> "GlyphMatcher":
        config = config or DecoderConfig()
        prng = Prng(seed)
        params = init_encoder(prng.spawn("encoder"), dtype)
        params.update(init_decoder(prng.spawn("decoder"), config, dtype))
        return cls(params, config)

    def with_config(self, config: DecoderConfig) -> "GlyphMatcher":
        """Same weights, different decoder flags (used for ablation read-outs)."""
        return GlyphMatcher(self.params, config)

    def glyph_features(self, glyph_line: GlyphLine) -> Tensor:
        return encode(self.params, glyph_line.image)

    def forward(self, image, glyph_line: GlyphLine, glyph_features: Optional[Tensor] = None) -> Forward:
        gf = self.glyph_features(glyph_line) if glyph_features is None else glyph_features
        S = similarity_map(gf, encode(self.params, image))
        dec = decode_map(S, glyph_line, self.params, self.config)
        return Forward(S, dec, class_log_probs(dec.P, self.config))

    def log_probs(self, image, glyph_line: GlyphLine, glyph_features: Optional[Tensor] = None) -> np.ndarray:
        with no_grad():
            return self.forward(image, glyph_line, glyph_features).log_probs.data

    def recognize(self, image, glyph_line: GlyphLine, lm=None, beam_width: int = 1,
                  alpha: float = 1.0, beta: float = 2.0, glyph_features: Optional[Tensor] = None) -> str:
        lp = self.log_probs(image, glyph_line, glyph_features)
        charset = charset_of(glyph_line)
        if lm is None and beam_width <= 1:
            return greedy_decode(lp, charset)
        return beam_search(lp, charset, lm=lm, alpha=alpha, beta=beta, beam_width=beam_width)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())
