"""Training objective, optimisation loop and checkpoint persistence."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .ctc import ctc_loss, min_frames
from .decoder import DecoderConfig
from .encoder import STRIDE, GlyphLine, build_glyph_line
from .model import GlyphMatcher, encode_targets
from .optim import AdamState, adam_step
from .rng import Prng, derive_seed
from .synth import DEFAULT_ALPHABET, FontAtlas, TextLineSample, augment, render_line, sample_text
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MASKED = -1.0e4  # added to non-target logits; exp underflows to exactly zero


# -- similarity supervision -------------------------------------------------------
@dataclass
class SimTargets:
    chars: list  # target character per text-line feature column
    spans: list  # glyph-line feature-row span [a, b) per column

    def __len__(self) -> int:
        return len(self.chars)


def sim_targets(sample: TextLineSample, glyph_line: GlyphLine) -> SimTargets:
    """Column j targets the character whose box covers pixel ``2j + 1``."""
    width = sample.image.shape[1]
    n_cols = width // STRIDE
    ends = np.array([b for _, b in sample.boxes])
    which = np.searchsorted(ends, np.arange(n_cols) * STRIDE + 1, side="right")
    spans_by_char = dict(zip(glyph_line.chars, glyph_line.spans()))
    chars, spans = [], []
    for k in which.tolist():
        ch = sample.text[k]
        if ch not in spans_by_char:
            raise KeyError(f"character {ch!r} is not in the exemplar alphabet")
        chars.append(ch)
        spans.append(spans_by_char[ch])
    return SimTargets(chars, spans)


def _target_mask(targets: SimTargets, n_rows: int) -> np.ndarray:
    mask = np.zeros((n_rows, len(targets)), dtype=bool)
    for j, (a, b) in enumerate(targets.spans):
        mask[a:b, j] = True
    return mask


def sim_loss(S: Tensor, targets: SimTargets, scale: float = 1.0, mode: str = "column") -> Tensor:
    """Cross-entropy pulling each column's similarity mass onto its target glyph.

    ``column`` mode normalises every text column over the glyph-line rows and
    scores ``-log`` of the softmax mass inside the target span, averaged over
    columns. ``row`` mode is the transposed reading: each glyph-line row of a
    character present in the line is normalised over text columns.
    """
    n_rows, n_cols = S.shape
    if len(targets) != n_cols:
        raise ValueError(f"targets cover {len(targets)} columns, map has {n_cols}")
    mask = _target_mask(targets, n_rows)
    bias = np.where(mask, 0.0, MASKED).astype(S.dtype)
    logits = S * scale
    if mode == "column":
        ls = T.log_softmax(logits, axis=0)
        return -T.mean(T.logsumexp(ls + Tensor(bias), axis=0))
    if mode == "row":
        rows = np.flatnonzero(mask.any(axis=1))
        ls = T.log_softmax(logits[rows], axis=1)
        return -T.mean(T.logsumexp(ls + Tensor(bias[rows]), axis=1))
    raise ValueError(f"unknown sim loss mode {mode!r}")


class LossParts(NamedTuple):
    total: Tensor
    pred: float  # nan when the CTC target was infeasible
    sim: float


def total_loss(log_probs: Tensor, S: Tensor, target: Sequence[int], targets: Optional[SimTargets],
               lam: float = 1.0, sim_scale: float = 1.0, sim_mode: str = "column",
               ctc_weight: float = 1.0, ctc_reduction: str = "sum") -> LossParts:
    """CTC on the class log-probabilities plus ``lam`` times the similarity loss.

    ``ctc_reduction="mean"`` divides the CTC term by the target length. The
    CTC value is always reported, but ``ctc_weight`` scales its contribution
    (0 during a warm-up).
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if ctc_reduction not in ("sum", "mean"):
        raise ValueError(f"unknown CTC reduction {ctc_reduction!r}")
    terms = []
    pred = math.nan
    if log_probs.shape[0] >= min_frames(target):
        lp = ctc_loss(log_probs, target)
        if ctc_reduction == "mean":
            lp = lp * (1.0 / max(1, len(target)))
        pred = float(lp.data)
        if ctc_weight == 1.0:
            terms.append(lp)
        elif ctc_weight > 0:
            terms.append(lp * ctc_weight)
    else:
        log.warning("skipping CTC term: %d labels need more than %d frames", len(target), log_probs.shape[0])
    sim = math.nan
    if lam > 0 and targets is not None:
        ls = sim_loss(S, targets, sim_scale, sim_mode)
        sim = float(ls.data)
        terms.append(ls * lam)
    if not terms:
        total = Tensor(np.zeros((), dtype=log_probs.dtype))
    else:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
    return LossParts(total, pred, sim)


# -- configuration ------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 12
    lam: float = 1.0
    iters: int = 1000
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    alphabet: str = DEFAULT_ALPHABET
    max_len: int = 24
    min_len: int = 4
    fonts_per_batch: int = 2
    extra_font_prob: float = 0.25  # chance a font group is drawn from random-alphabet fonts
    shuffle_glyphs: bool = True
    augment: bool = True
    sim_scale: float = 10.0
    sim_mode: str = "column"
    ctc_warmup: int = 150  # leading iterations trained on the similarity loss alone
    ctc_ramp: int = 200  # iterations after the warm-up over which CTC and the decoder phase in
    ctc_reduction: str = "mean"
    val_every: int = 250
    val_lines: int = 20
    patience: Optional[int] = 3  # validations without improvement before stopping

    def __post_init__(self):
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.ctc_warmup < 0:
            raise ValueError("ctc_warmup must be non-negative")
        if self.ctc_ramp < 0:
            raise ValueError("ctc_ramp must be non-negative")
        if self.ctc_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown CTC reduction {self.ctc_reduction!r}")
        if self.ctc_warmup and self.lam == 0:
            self.ctc_warmup = 0  # nothing to warm up on
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.fonts_per_batch < 1 or self.batch_size % self.fonts_per_batch:
            raise ValueError("batch size must be a multiple of fonts_per_batch")

    def to_dict(self) -> dict:
        return asdict(self)


# -- checkpoints ---------------------------------------------------------------------
MAGIC = b"GLYF"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    iteration: int
    params: dict  # name -> ndarray
    adam: AdamState = field(default_factory=AdamState)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # trainer bookkeeping (best CER, patience)
    version: int = CKPT_VERSION

    def model(self) -> GlyphMatcher:
        dec = DecoderConfig(**self.config.get("decoder", {}))
        return GlyphMatcher({k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}, dec)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    return int(_fnv1a64_kernel()(np.frombuffer(data, dtype=np.uint8)))


_KERNEL = None


def _fnv1a64_kernel():
    global _KERNEL
    if _KERNEL is None:
        import numba

        @numba.njit(cache=False)
        def kernel(buf):
            h = np.uint64(0xCBF29CE484222325)
            prime = np.uint64(0x100000001B3)
            for b in buf:
                h = (h ^ np.uint64(b)) * prime
            return h

        _KERNEL = kernel
    return _KERNEL


def _pack_tensors(items: list) -> bytes:
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise TypeError(f"cannot store {name} with dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    body = [MAGIC, struct.pack("<IQ", ckpt.version, ckpt.iteration)]
    body.append(_pack_tensors([(n, ckpt.params[n]) for n in names]))
    opt = []
    for n in names:
        if n in ckpt.adam.m:
            opt.append((f"{n}.adam.m", ckpt.adam.m[n]))
            opt.append((f"{n}.adam.v", ckpt.adam.v[n]))
    body.append(_pack_tensors(opt))
    meta = {
        "config": ckpt.config,
        "adam": {k: getattr(ckpt.adam, k) for k in ("lr", "beta1", "beta2", "eps", "t")},
        "extra": ckpt.extra,
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    body.append(struct.pack("<I", len(raw)) + raw)
    data = b"".join(body)
    return data + struct.pack("<Q", fnv1a64(data))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> list:
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            code, ndim = self.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name}")
            shape = self.unpack(f"<{ndim}I")
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
            out.append((name, arr.astype(dt.newbyteorder("="))))
        return out


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(data) < 24:
        raise CheckpointError(f"{path}: checkpoint is truncated")
    r = _Reader(data[:-8])
    r.take(4)
    version, iteration = r.unpack("<IQ")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params = dict(r.tensors())
    opt = dict(r.tensors())
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes before checksum")
    (stored,) = struct.unpack("<Q", data[-8:])
    if stored != fnv1a64(data[:-8]):
        raise CheckpointError(f"{path}: checksum mismatch")
    adam = AdamState(**meta["adam"])
    for name in params:
        if f"{name}.adam.m" in opt:
            adam.m[name] = opt[f"{name}.adam.m"]
            adam.v[name] = opt[f"{name}.adam.v"]
    return Checkpoint(iteration, params, adam, meta["config"], meta.get("extra", {}), version)


# -- training loop ---------------------------------------------------------------------
@dataclass
class LogRecord:
    iteration: int
    pred: float
    sim: float
    total: float
    val_cer: Optional[float] = None

    def line(self) -> str:
        val = "-" if self.val_cer is None else repr(self.val_cer)
        return f"{self.iteration}\t{self.pred!r}\t{self.sim!r}\t{self.total!r}\t{val}"


def glyph_line_for(font: FontAtlas, alphabet: Sequence[str], prng: Optional[Prng] = None) -> GlyphLine:
    order = [c for c in alphabet if c in font.glyphs]
    if prng is not None:
        order = prng.shuffle(order)
    return build_glyph_line(font, order)


def make_sample(font: FontAtlas, text: str, seed: Optional[int]) -> TextLineSample:
    sample = render_line(font, text)
    return augment(sample, seed) if seed is not None else sample


def validation_set(fonts: Sequence[FontAtlas], texts: Sequence[str], n_lines: int, seed: int,
                   max_len: int = 24) -> list:
    """Fixed (font, sample) pairs rendered from held-out text, unaugmented."""
    out = []
    for font in fonts:
        prng = Prng(derive_seed("val", seed, font.font_id))
        for _ in range(n_lines):
            text = sample_text(prng, texts, max_len)
            out.append((font, render_line(font, text)))
    return out


def evaluate_cer(model: GlyphMatcher, pairs: Sequence, alphabet: Sequence[str]) -> float:
    from .eval import cer

    gts, preds, cache = [], [], {}
    with no_grad():
        for font, sample in pairs:
            if font.font_id not in cache:
                gl = glyph_line_for(font, alphabet)
                cache[font.font_id] = (gl, model.glyph_features(gl))
            gl, gf = cache[font.font_id]
            preds.append(model.recognize(sample.image, gl, glyph_features=gf))
            gts.append(sample.text)
    return cer(gts, preds)


class Trainer:
    """Deterministic optimisation loop; the batch at step ``i`` depends only on (seed, i)."""

    def __init__(self, config: TrainConfig, fonts: Sequence[FontAtlas], texts: Sequence[str],
                 extra_fonts: Sequence[FontAtlas] = (), val_texts: Sequence[str] = (),
                 resume: Optional[Checkpoint] = None):
        if not fonts:
            raise ValueError("need at least one training font")
        if not texts:
            raise ValueError("need training text")
        self.config = config
        self.fonts = sorted(fonts, key=lambda f: f.font_id)
        self.extra_fonts = sorted(extra_fonts, key=lambda f: f.font_id)
        self.texts = list(texts)
        if resume is None:
            self.model = GlyphMatcher.create(config.seed, config.decoder)
            self.adam = AdamState(lr=config.lr)
            self.iteration = 0
            self.extra = {"best_cer": None, "best_iter": None, "stale": 0}
        else:
            self.model = resume.model()
            self.adam = resume.adam
            self.iteration = resume.iteration
            self.extra = dict(resume.extra)
        self.val_pairs = (
            validation_set(self.fonts, val_texts, config.val_lines, config.seed, config.max_len)
            if val_texts and config.val_lines > 0 else []
        )

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.iteration,
            {k: p.data.copy() for k, p in self.model.params.items()},
            AdamState(self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.t,
                      {k: v.copy() for k, v in self.adam.m.items()},
                      {k: v.copy() for k, v in self.adam.v.items()}),
            self.config.to_dict(),
            dict(self.extra),
        )

    def batch(self, step: int) -> list:
        """``(glyph_line, [samples])`` groups for one optimisation step."""
        cfg = self.config
        prng = Prng(derive_seed("batch", cfg.seed, step))
        per_group = cfg.batch_size // cfg.fonts_per_batch
        groups = []
        for g in range(cfg.fonts_per_batch):
            pool = self.fonts
            if self.extra_fonts and prng.random() < cfg.extra_font_prob:
                pool = self.extra_fonts
            font = prng.choice(pool)
            gl = glyph_line_for(font, cfg.alphabet, prng if cfg.shuffle_glyphs else None)
            samples = []
            for _ in range(per_group):
                text = sample_text(prng, self.texts, cfg.max_len, cfg.min_len)
                seed = prng.next_u64() if cfg.augment else None
                samples.append(make_sample(font, text, seed))
            groups.append((gl, samples))
        return groups

    def _ramp(self, step: int) -> float:
        cfg = self.config
        if step < cfg.ctc_warmup:
            return 0.0
        if cfg.ctc_ramp == 0:
            return 1.0
        return min(1.0, (step - cfg.ctc_warmup + 1) / cfg.ctc_ramp)

    def ctc_weight(self, step: int) -> float:
        """Weight of the CTC term; it ramps in only after a similarity warm-up."""
        return self._ramp(step) if self.config.ctc_warmup else 1.0

    def decoder_lr_scale(self, step: int) -> float:
        """Step-size multiplier for decoder parameters (a short warm-up of their own)."""
        return self._ramp(step)

    def step(self) -> LogRecord:
        cfg = self.config
        model = self.model
        groups = self.batch(self.iteration)
        weight = self.ctc_weight(self.iteration)
        for p in model.params.values():
            p.grad = None
        losses, preds, sims = [], [], []
        for gl, samples in groups:
            gf = model.glyph_features(gl)
            for sample in samples:
                out = model.forward(sample.image, gl, gf)
                targets = sim_targets(sample, gl) if cfg.lam > 0 else None
                parts = total_loss(out.log_probs, out.S, encode_targets(sample.text, gl), targets,
                                   cfg.lam, cfg.sim_scale, cfg.sim_mode, weight, cfg.ctc_reduction)
                losses.append(parts.total)
                preds.append(parts.pred)
                sims.append(parts.sim)
        total = losses[0]
        for t in losses[1:]:
            total = total + t
        total = total * (1.0 / len(losses))
        total.backward()
        scale = self.decoder_lr_scale(self.iteration)
        adam_step({k: p.data for k, p in model.params.items()},
                  {k: p.grad for k, p in model.params.items()}, self.adam,
                  {k: scale for k in model.params if k.startswith("dec.")} if scale < 1.0 else None)
        self.iteration += 1
        pred = float(np.nanmean(preds)) if not all(map(math.isnan, preds)) else math.nan
        sim = float(np.nanmean(sims)) if not all(map(math.isnan, sims)) else 0.0
        return LogRecord(self.iteration, pred, sim, float(total.data))

    def validate(self) -> float:
        return evaluate_cer(self.model, self.val_pairs, self.config.alphabet)

    def run(self, on_checkpoint: Optional[Callable] = None) -> Iterator[LogRecord]:
        """Train until ``config.iters`` or validation saturation, yielding log records.

        ``on_checkpoint(kind, ckpt)`` receives ``"last"`` at every validation
        and ``"best"`` whenever validation CER improves.
        """
        cfg = self.config
        while self.iteration < cfg.iters:
            rec = self.step()
            if self.val_pairs and cfg.val_every and (self.iteration % cfg.val_every == 0 or self.iteration == cfg.iters):
                rec.val_cer = self.validate()
                best = self.extra.get("best_cer")
                improved = best is None or rec.val_cer < best
                if improved:
                    self.extra.update(best_cer=rec.val_cer, best_iter=self.iteration, stale=0)
                else:
                    self.extra["stale"] = self.extra.get("stale", 0) + 1
                if on_checkpoint is not None:
                    ckpt = self.checkpoint()
                    on_checkpoint("last", ckpt)
                    if improved:
                        on_checkpoint("best", ckpt)
                yield rec
                if cfg.patience is not None and self.extra["stale"] >= cfg.patience:
                    log.info("validation CER saturated at iteration %d", self.iteration)
                    return
            else:
                yield rec


def train(config: TrainConfig, fonts: Sequence[FontAtlas], texts: Sequence[str],
          extra_fonts: Sequence[FontAtlas] = (), val_texts: Sequence[str] = (),
          out_dir=None, resume: Optional[Checkpoint] = None) -> tuple:
    """Run training; returns ``(trainer, records)``.

    With ``out_dir`` set, writes ``loss.log``, ``last.ckpt`` and ``best.ckpt``.
    """
    trainer = Trainer(config, fonts, texts, extra_fonts, val_texts, resume)
    records = []
    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "loss.log", "a" if resume else "w", encoding="utf-8", newline="\n")

        def sink(kind, ckpt):
            save_checkpoint(out / f"{kind}.ckpt", ckpt)
    else:
        sink = None
    try:
        for rec in trainer.run(sink):
            records.append(rec)
            if log_file is not None:
                log_file.write(rec.line() + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "last.ckpt", trainer.checkpoint())
    return trainer, records
