"""``glyphmatch`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import corpus, storage, synth
from .decoder import DecoderConfig
from .rng import Prng, derive_seed

log = logging.getLogger("glyphmatch")

ABLATE_FLAGS = {
    "no-pos-enc": "use_pos_enc",
    "no-self-attn": "use_self_attn",
    "no-agg-embed": "use_agg_embed",
}


class UsageError(Exception):
    pass


def _styles(value: str) -> list:
    out = []
    for code in value.split(","):
        code = code.strip()
        style = synth.STYLE_CODES.get(code.upper(), code.lower())
        if style not in synth.TRAIN_STYLES:
            raise argparse.ArgumentTypeError(
                f"invalid style {code!r}; use R, B, L or I (regular, bold, light, italic)")
        out.append(style)
    return out


# -- synth -----------------------------------------------------------------------------
def cmd_synth(args) -> int:
    out = Path(args.out)
    alphabet = synth.DEFAULT_ALPHABET
    train_texts, held_texts = corpus.split(corpus.sentences(args.corpus, alphabet))
    splits = synth.make_splits(args.fonts_per_style, args.seed, args.styles, args.test_fonts, alphabet)

    def lines(font, texts, n, tag):
        prng = Prng(derive_seed("synth-lines", args.seed, tag, font.font_id))
        return [synth.render_line(font, synth.sample_text(prng, texts, args.max_len)) for _ in range(n)]

    for font in splits.train:
        storage.save_font(out / "fonts" / font.font_id, font)
        storage.write_dataset(out / "train" / font.font_id, lines(font, train_texts, args.lines_per_font, "train"))
        if args.val_lines:
            storage.write_dataset(out / "val" / font.font_id, lines(font, held_texts, args.val_lines, "val"))
    for font in splits.test:
        storage.save_font(out / "test_fonts" / font.font_id, font)
        storage.write_dataset(out / "test" / font.font_id, lines(font, held_texts, args.test_lines, "test"))
    for i in range(args.alphabets):
        font, mapping = synth.gen_random_alphabet_font(derive_seed("alphabet", args.seed, i) & 0xFFFFFFFF,
                                                       args.alphabet_size)
        font = synth.FontAtlas(f"A{i:03d}", font.style, font.glyphs)
        d = storage.save_font(out / "alphabet_fonts" / font.font_id, font)
        (d / "mapping.txt").write_text("".join(f"{k}\t{v}\n" for k, v in mapping.items()), encoding="utf-8")
        storage.write_dataset(out / "alphabet" / font.font_id, lines(font, held_texts, args.test_lines, "alpha"))
    n_train = len(splits.train)
    print(f"{n_train} fonts, {n_train * args.lines_per_font} train lines, "
          f"{len(splits.test)} test fonts, {args.alphabets} random alphabets -> {out}")
    return 0


# -- lm-train --------------------------------------------------------------------------
def cmd_lm_train(args) -> int:
    from .lm import train_lm

    lines = corpus.read_lines(args.corpus)
    lm = train_lm(lines, order=args.order, alphabet=synth.DEFAULT_ALPHABET, k=args.k)
    lm.save(args.out)
    print(f"order-{lm.order} LM over {len(lm.vocab)} symbols -> {args.out}")
    return 0


# -- train -----------------------------------------------------------------------------
def _decoder_config(ablate) -> DecoderConfig:
    cfg = DecoderConfig()
    for name in ablate or ():
        if name == "encoder-only":
            cfg.encoder_only = True
        else:
            setattr(cfg, ABLATE_FLAGS[name], False)
    return cfg


def cmd_train(args) -> int:
    from .trainer import TrainConfig, load_checkpoint, train

    data = Path(args.data)
    fonts = storage.load_fonts(data / "fonts")
    if not fonts:
        raise FileNotFoundError(f"{data / 'fonts'}: no training fonts found")
    texts = storage.read_texts(data / "train")
    if not texts:
        raise FileNotFoundError(f"{data / 'train'}: no training lines found")
    val_texts = storage.read_texts(data / "val") if (data / "val").is_dir() else []
    extra = storage.load_fonts(data / "alphabet_fonts") if args.with_alphabets else []
    cfg = TrainConfig(
        lr=args.lr, batch_size=args.batch, lam=args.lam, iters=args.iters, seed=args.seed,
        decoder=_decoder_config(args.ablate), val_every=args.val_every, val_lines=args.val_lines,
        fonts_per_batch=args.fonts_per_batch, sim_scale=args.sim_scale, sim_mode=args.sim_mode,
        patience=args.patience if args.patience > 0 else None, ctc_warmup=args.ctc_warmup,
        ctc_ramp=args.ctc_ramp, ctc_reduction=args.ctc_reduction,
    )
    resume = load_checkpoint(args.resume) if args.resume else None
    trainer, records = train(cfg, fonts, texts, extra, val_texts, out_dir=args.out, resume=resume)
    last = records[-1] if records else None
    print(f"trained to iteration {trainer.iteration}" + (f", total loss {last.total:.4f}" if last else ""))
    return 0


# -- recognize -------------------------------------------------------------------------
def _glyph_line(font, alphabet):
    from .trainer import glyph_line_for

    return glyph_line_for(font, alphabet if alphabet else font.alphabet)


def cmd_recognize(args) -> int:
    from .ctc import beam_search, greedy_decode
    from .eval import dump_maps
    from .lm import NGramLM
    from .model import charset_of
    from .tensor import no_grad
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt).model()
    font = storage.load_font(args.font)
    gl = _glyph_line(font, args.alphabet)
    lm = NGramLM.load(args.lm) if args.lm else None
    use_beam = lm is not None or args.beam is not None
    beam = 15 if args.beam is None else args.beam
    charset = charset_of(gl)
    with no_grad():
        gf = model.glyph_features(gl)
        for path in args.images:
            image = storage.read_pgm(path)
            out = model.forward(image, gl, gf)
            lp = out.log_probs.data
            if use_beam:
                pred = beam_search(lp, charset, lm=lm, alpha=args.alpha, beta=args.beta, beam_width=beam)
            else:
                pred = greedy_decode(lp, charset)
            if args.dump_maps:
                dump_maps(out, args.dump_maps, Path(path).stem)
            print(f"{path}\t{pred}")
    return 0


# -- eval ------------------------------------------------------------------------------
def _checkpoint_map(values) -> dict:
    out = {}
    for v in values:
        if "=" in v:
            k, p = v.split("=", 1)
            out[k] = p
        else:
            out["*"] = v
    return out


def cmd_eval(args) -> int:
    from .eval import run_experiment
    from .lm import NGramLM

    lm = NGramLM.load(args.lm) if args.lm else None
    beam = args.beam if args.beam is not None else (15 if lm is not None else 1)
    reports = run_experiment(args.grid, _checkpoint_map(args.ckpt), args.data, args.out, args.limit,
                             lm=lm, beam_width=beam, alpha=args.alpha, beta=args.beta, split=args.split)
    failed = 0
    for r in reports:
        if r.error:
            failed += 1
            print(f"{args.grid}\t{r.cell}\terror\t{r.error}")
        else:
            print(f"{args.grid}\t{r.cell}\tCER {r.cer:.4f}\tWER {r.wer:.4f}\tn={len(r.samples)}")
    return 1 if failed == len(reports) else 0


# -- select-font -----------------------------------------------------------------------
def cmd_select_font(args) -> int:
    from .eval import entropy_select
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt).model()
    fonts = [storage.load_font(p) for p in args.fonts]
    image = storage.read_pgm(args.image)
    alphabet = args.alphabet or synth.DEFAULT_ALPHABET
    _, scores = entropy_select(model, image, fonts, alphabet)
    for fid in sorted(scores, key=lambda k: (scores[k], k)):
        print(f"{fid}\t{scores[fid]:.6f}")
    return 0


# -- parser ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="glyphmatch", description="Text recognition by matching glyph exemplars.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate fonts and line datasets", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--styles", type=_styles, default=["regular"], help="comma-separated subset of R,B,L,I")
    p.add_argument("--fonts-per-style", type=int, default=3)
    p.add_argument("--lines-per-font", type=int, default=100)
    p.add_argument("--val-lines", type=int, default=20)
    p.add_argument("--test-fonts", type=int, default=2)
    p.add_argument("--test-lines", type=int, default=50)
    p.add_argument("--alphabets", type=int, default=0, help="number of random-alphabet fonts")
    p.add_argument("--alphabet-size", type=int, default=26)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--corpus", default=None, help="UTF-8 text file (default: bundled corpus)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("lm-train", help="train a character n-gram LM", formatter_class=fmt)
    p.add_argument("--corpus", default=None, help="UTF-8 text file (default: bundled corpus)")
    p.add_argument("--order", type=int, default=6, help="n-gram order")
    p.add_argument("--k", type=float, default=0.1, help="add-k smoothing constant")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; training is deterministic")
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="directory written by `synth`")
    p.add_argument("--out", default="run", help="directory for loss.log and checkpoints")
    p.add_argument("--iters", type=int, default=1000, help="maximum training iterations")
    p.add_argument("--seed", type=int, default=0, help="seed for initialisation and batch sampling")
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--batch", type=int, default=12, help="lines per optimisation step")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="weight of the similarity loss")
    p.add_argument("--ablate", action="append", choices=sorted([*ABLATE_FLAGS, "encoder-only"]),
                   help="disable a decoder component (repeatable)")
    p.add_argument("--val-every", type=int, default=250, help="iterations between validations; 0 disables")
    p.add_argument("--val-lines", type=int, default=20, help="validation lines per training font")
    p.add_argument("--patience", type=int, default=3, help="stale validations before stopping; 0 disables")
    p.add_argument("--fonts-per-batch", type=int, default=2, help="fonts (glyph lines) sampled per step")
    p.add_argument("--sim-scale", type=float, default=10.0, help="similarity-map temperature in the sim loss")
    p.add_argument("--sim-mode", choices=["column", "row"], default="column",
                   help="softmax over glyph rows per column, or over columns per glyph row")
    p.add_argument("--ctc-warmup", type=int, default=150,
                   help="leading iterations trained on the similarity loss alone")
    p.add_argument("--ctc-ramp", type=int, default=200,
                   help="iterations after the warm-up over which the CTC weight and decoder step size rise to full")
    p.add_argument("--ctc-reduction", choices=["mean", "sum"], default="mean",
                   help="CTC per target character (mean) or per line (sum)")
    p.add_argument("--with-alphabets", action="store_true", help="mix random-alphabet fonts into batches")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recognize", help="transcribe line images", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--font", required=True, help="font atlas directory supplying the exemplars")
    p.add_argument("--alphabet", default=None, help="restrict exemplars to these characters")
    p.add_argument("--lm", default=None, help="n-gram LM file; enables beam search")
    p.add_argument("--alpha", type=float, default=1.0, help="LM weight")
    p.add_argument("--beta", type=float, default=2.0, help="word insertion bonus")
    p.add_argument("--beam", type=int, default=None, help="beam width (15 when --lm is given; greedy otherwise)")
    p.add_argument("--dump-maps", default=None, help="directory for S / S_pe / S_star heatmaps")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("eval", help="run an experiment grid", formatter_class=fmt)
    p.add_argument("--ckpt", action="append", required=True, help="PATH or CELL=PATH (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", choices=["vs1", "vs2", "a2", "ablation"], required=True)
    p.add_argument("--split", default=None, help="dataset split to score (default depends on the grid)")
    p.add_argument("--out", default="reports", help="directory for JSON-lines reports")
    p.add_argument("--limit", type=int, default=None, help="max lines per font")
    p.add_argument("--lm", default=None, help="n-gram LM file; enables beam search")
    p.add_argument("--alpha", type=float, default=1.0, help="LM weight")
    p.add_argument("--beta", type=float, default=2.0, help="word insertion bonus")
    p.add_argument("--beam", type=int, default=None, help="beam width (15 with --lm, else greedy)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select-font", help="rank exemplar fonts by read-out entropy", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--alphabet", default=None)
    p.add_argument("fonts", nargs="+", help="candidate font atlas directories")
    p.set_defaults(func=cmd_select_font)
    return parser


def _thread_limit():
    raw = os.environ.get("GLYPHMATCH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GLYPHMATCH_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"glyphmatch: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"glyphmatch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
