"""Alphabet-agnostic text recognition by matching line features against glyph exemplars."""
from .decoder import ABLATIONS, DecoderConfig
from .encoder import GlyphLine, build_glyph_line, encode, similarity_map
from .model import GlyphMatcher

__all__ = ["ABLATIONS", "DecoderConfig", "GlyphLine", "GlyphMatcher", "build_glyph_line", "encode", "similarity_map"]
__version__ = "0.1.0"
