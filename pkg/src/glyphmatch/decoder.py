"""Alphabet-agnostic decoding of a similarity map into per-column class logits."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .encoder import PAD, GlyphLine, glorot
from .rng import Prng
from .tensor import Tensor

TOKEN_DIM = 360
BAND_SCALE = 720.0


@dataclass
class DecoderConfig:
    use_pos_enc: bool = True
    use_self_attn: bool = True
    use_agg_embed: bool = True
    encoder_only: bool = False
    n_layers: int = 3
    n_heads: int = 4
    head_dim: int = 90  # 360 / 4; set to 360 for the "360 per head" reading
    token_dim: int = TOKEN_DIM
    logit_scale: float = 10.0
    identity_init: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


# Similarity peaks sit on one row of the matching span while partial matches
# elsewhere stay lower; cutting below this keeps span sums peak-dominated.
PE_THRESHOLD = 0.5

# Rows of the component-analysis table: (pos. enc., self-attn, agg. embed.)
ABLATIONS = {
    "full": dict(use_pos_enc=True, use_self_attn=True, use_agg_embed=True),
    "no-pos-enc": dict(use_pos_enc=False, use_self_attn=True, use_agg_embed=True),
    "no-disamb": dict(use_pos_enc=False, use_self_attn=False, use_agg_embed=True),
    "no-agg-embed": dict(use_pos_enc=True, use_self_attn=True, use_agg_embed=False),
    "none": dict(use_pos_enc=False, use_self_attn=False, use_agg_embed=False),
    "encoder-only": dict(use_pos_enc=False, use_self_attn=False, use_agg_embed=False, encoder_only=True),
}


def ablated(cfg: DecoderConfig, name: str) -> DecoderConfig:
    return DecoderConfig(**{**cfg.to_dict(), **ABLATIONS[name]})


def init_decoder(prng: Prng, cfg: Optional[DecoderConfig] = None, dtype=np.float32) -> dict:
    cfg = cfg or DecoderConfig()
    d = cfg.token_dim
    inner = cfg.n_heads * cfg.head_dim
    p = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.weight"] = glorot(prng, (fan_in, fan_out), fan_in, fan_out, dtype)
        p[f"{name}.bias"] = np.zeros(fan_out, dtype)

    linear("dec.pe.l1", 4, 16)
    linear("dec.pe.l2", 16, 32)
    linear("dec.pe.l3", 32, 1)
    for k in range(cfg.n_layers):
        pre = f"dec.attn{k}"
        for proj in ("q", "k", "v"):
            linear(f"{pre}.{proj}", d, inner)
        linear(f"{pre}.o", inner, d)
        linear(f"{pre}.ff1", d, d)
        linear(f"{pre}.ff2", d, d)
        for ln in ("ln1", "ln2"):
            p[f"{pre}.{ln}.gain"] = np.ones(d, dtype)
            p[f"{pre}.{ln}.bias"] = np.zeros(d, dtype)
    linear("dec.agg.sim", d, d)
    linear("dec.agg.tmpl", d, d)
    a = np.sqrt(6.0 / (d + 1))
    p["dec.agg.boundary"] = prng.uniform(-a, a, d).astype(dtype)
    if cfg.identity_init:
        _identity_init(p, cfg)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


# -- glyph-line derived matrices ---------------------------------------------
def width_bands(glyph_line: GlyphLine) -> np.ndarray:
    """Per feature row, the pixel width of the exemplar owning that row.

    Returned as the W_g' vector w_g; the band matrix is ``w_g[:, None]``
    broadcast across text columns.
    """
    w = np.zeros(glyph_line.feature_width, dtype=np.float32)
    for (a, b), wid in zip(glyph_line.spans(), glyph_line.widths):
        w[a:b] = wid
    return w


def glyph_width_map(glyph_line: GlyphLine) -> np.ndarray:
    """Binary |A| x W_g' matrix; row i marks the feature span of character i.

    The padding region belongs to no character and has no row.
    """
    spans = [span for c, span in zip(glyph_line.chars, glyph_line.spans()) if c is not PAD]
    m = np.zeros((len(spans), glyph_line.feature_width), dtype=np.float32)
    for i, (a, b) in enumerate(spans):
        m[i, a:b] = 1.0
    return m


# -- decoder stages ----------------------------------------------------------
def _linear(x: Tensor, p: dict, name: str) -> Tensor:
    return T.matmul(x, p[f"{name}.weight"]) + p[f"{name}.bias"]


def _identity_init(p: dict, cfg: DecoderConfig) -> None:
    """Start the decoder as a thresholded pass-through of the similarity map.

    The position MLP begins as ``relu(S - PE_THRESHOLD)`` on its first hidden
    unit, the attention and feed-forward branches begin silent, and both
    aggregation embeddings begin as the identity. The untrained read-out is
    then the cosine between span templates and the thresholded columns of S,
    which behaves like a per-span max; every weight still trains.
    """
    p["dec.pe.l1.weight"][:, 0] = (1.0, 0.0, 0.0, 0.0)
    p["dec.pe.l1.bias"][0] = -PE_THRESHOLD
    p["dec.pe.l2.weight"][:, 0] = 0.0
    p["dec.pe.l2.weight"][0, 0] = 1.0
    p["dec.pe.l3.weight"][:] = 0.0
    p["dec.pe.l3.weight"][0, 0] = 1.0
    for k in range(cfg.n_layers):
        p[f"dec.attn{k}.o.weight"][:] = 0.0
        p[f"dec.attn{k}.ff2.weight"][:] = 0.0
    for name in ("dec.agg.sim", "dec.agg.tmpl"):
        p[f"{name}.weight"][:] = np.eye(cfg.token_dim, dtype=p[f"{name}.weight"].dtype)


def position_encode(S: Tensor, bands: np.ndarray, params: dict) -> Tensor:
    """Per-cell MLP over (similarity, x, y, glyph width) -> scalar."""
    rows, cols = S.shape
    if bands.shape != (rows,):
        raise ValueError(f"bands must have shape ({rows},), got {bands.shape}")
    dtype = S.dtype
    xs = np.broadcast_to((np.arange(cols, dtype=dtype) / cols)[None, :], (rows, cols))
    ys = np.broadcast_to((np.arange(rows, dtype=dtype) / rows)[:, None], (rows, cols))
    gs = np.broadcast_to((bands.astype(dtype) / BAND_SCALE)[:, None], (rows, cols))
    const = Tensor(np.stack([xs, ys, gs], axis=-1).reshape(-1, 3))
    feats = T.concat([S.reshape(rows * cols, 1), const], axis=1)
    h = T.relu(_linear(feats, params, "dec.pe.l1"))
    h = T.relu(_linear(h, params, "dec.pe.l2"))
    return _linear(h, params, "dec.pe.l3").reshape(rows, cols)


def self_attention_disambiguate(X: Tensor, params: dict, cfg: Optional[DecoderConfig] = None) -> Tensor:
    """Transformer over the columns of a W_g' x W' map; returns the same shape.

    No positional terms are added, so the module is equivariant to column
    permutations.
    """
    cfg = cfg or DecoderConfig()
    d = cfg.token_dim
    if X.shape[0] != d:
        raise ValueError(f"attention token dimension must be {d}, got {X.shape[0]}")
    h, hd = cfg.n_heads, cfg.head_dim
    n = X.shape[1]
    x = T.transpose(X, (1, 0))  # tokens: W' x d
    scale = 1.0 / np.sqrt(hd)
    for k in range(cfg.n_layers):
        pre = f"dec.attn{k}"

        def heads(t: Tensor) -> Tensor:
            return T.transpose(t.reshape(n, h, hd), (1, 0, 2))

        q = heads(_linear(x, params, f"{pre}.q"))
        kk = heads(_linear(x, params, f"{pre}.k"))
        v = heads(_linear(x, params, f"{pre}.v"))
        att = T.softmax(T.matmul(q, T.transpose(kk, (0, 2, 1))) * scale, axis=-1)
        ctx = T.transpose(T.matmul(att, v), (1, 0, 2)).reshape(n, h * hd)
        x = T.layernorm(x + _linear(ctx, params, f"{pre}.o"), -1, params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
        ff = _linear(T.relu(_linear(x, params, f"{pre}.ff1")), params, f"{pre}.ff2")
        x = T.layernorm(x + ff, -1, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
    return T.transpose(x, (1, 0))


def class_aggregate(S_star: Tensor, M: np.ndarray, params: dict, use_embed: bool = True) -> Tensor:
    """Aggregate S* over exemplar spans into (|A| + 1) x W' logits.

    The last row is the boundary class, scored by a learnt template that goes
    through the same path as the binary span rows. With embeddings enabled
    both sides are l2-normalised, so every logit lies in [-1, 1].
    """
    templates = T.concat([Tensor(M.astype(S_star.dtype)), params["dec.agg.boundary"].reshape(1, -1)], axis=0)
    if not use_embed:
        return T.matmul(templates, S_star)
    cols = T.l2_normalize(_linear(T.transpose(S_star, (1, 0)), params, "dec.agg.sim"), axis=-1)
    rows = T.l2_normalize(_linear(templates, params, "dec.agg.tmpl"), axis=-1)
    return T.matmul(rows, T.transpose(cols, (1, 0)))


class DecoderOutput(NamedTuple):
    S_pe: Tensor  # after position encoding (equal to S when disabled)
    S_star: Tensor
    P: Tensor  # (|A| + 1) x W' logits, boundary class last


def decode_map(S: Tensor, glyph_line: GlyphLine, params: dict, cfg: Optional[DecoderConfig] = None) -> DecoderOutput:
    """Run the decoder stages selected by ``cfg`` on one similarity map."""
    cfg = cfg or DecoderConfig()
    M = glyph_width_map(glyph_line)
    if cfg.encoder_only:
        raw = T.matmul(Tensor(M.astype(S.dtype)), S)
        boundary = Tensor(np.zeros((1, S.shape[1]), dtype=S.dtype))
        return DecoderOutput(S, S, T.concat([raw, boundary], axis=0))
    S_pe = position_encode(S, width_bands(glyph_line), params) if cfg.use_pos_enc else S
    S_star = self_attention_disambiguate(S_pe, params, cfg) if cfg.use_self_attn else S_pe
    return DecoderOutput(S_pe, S_star, class_aggregate(S_star, M, params, cfg.use_agg_embed))


def class_log_probs(P: Tensor, cfg: Optional[DecoderConfig] = None) -> Tensor:
    """Frame log-probabilities (W' x classes) from logits (classes x W')."""
    cfg = cfg or DecoderConfig()
    scale = cfg.logit_scale if (cfg.use_agg_embed and not cfg.encoder_only) else 1.0
    return T.log_softmax(T.transpose(P, (1, 0)) * scale, axis=-1)
