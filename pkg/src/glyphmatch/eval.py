"""Recognition metrics, entropy-based exemplar selection and the experiment harness."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import no_grad


# -- metrics -----------------------------------------------------------------------
def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _check_pairs(gt: Sequence, pred: Sequence) -> None:
    if len(gt) != len(pred):
        raise ValueError(f"{len(gt)} ground-truth strings but {len(pred)} predictions")
    if not gt:
        raise ValueError("no samples to score")


def sample_cer(gt: str, pred: str) -> float:
    if not gt:
        raise ValueError("ground-truth string is empty")
    return levenshtein(gt, pred) / len(gt)


def sample_wer(gt: str, pred: str) -> float:
    g = gt.split()
    if not g:
        raise ValueError("ground-truth string has no words")
    return levenshtein(g, pred.split()) / len(g)


def cer(gt: Sequence[str], pred: Sequence[str]) -> float:
    """Mean of per-sample normalised edit distances (not a pooled ratio)."""
    _check_pairs(gt, pred)
    return float(sum(sample_cer(g, p) for g, p in zip(gt, pred)) / len(gt))


def wer(gt: Sequence[str], pred: Sequence[str]) -> float:
    """As :func:`cer` with whitespace-delimited tokens; punctuation stays in tokens."""
    _check_pairs(gt, pred)
    return float(sum(sample_wer(g, p) for g, p in zip(gt, pred)) / len(gt))


# -- entropy selection ----------------------------------------------------------------
def mean_column_entropy(log_probs: np.ndarray) -> float:
    """Average over columns of the natural-log entropy of the class distribution."""
    lp = np.asarray(log_probs, dtype=np.float64)
    p = np.exp(lp)
    h = -np.sum(p * np.where(p > 0, lp, 0.0), axis=1)
    return float(h.mean())


def entropy_select(model, line_image, candidate_fonts: Sequence, alphabet: Optional[Sequence[str]] = None) -> tuple:
    """Pick the exemplar font whose glyph line gives the most confident read-out.

    Returns ``(best_font_id, {font_id: entropy})``; ties go to the
    lexicographically smallest id.
    """
    from .trainer import glyph_line_for
    from .synth import DEFAULT_ALPHABET

    if not candidate_fonts:
        raise ValueError("need at least one candidate font")
    alphabet = DEFAULT_ALPHABET if alphabet is None else alphabet
    scores = {}
    with no_grad():
        for font in candidate_fonts:
            gl = glyph_line_for(font, alphabet)
            scores[font.font_id] = mean_column_entropy(model.log_probs(line_image, gl))
    best = min(sorted(scores), key=lambda k: scores[k])
    return best, scores


# -- reports -------------------------------------------------------------------------
@dataclass
class EvalReport:
    cell: str
    samples: list = field(default_factory=list)  # dicts: id, gt, pred, cer, wer_tokens, font
    fingerprint: str = ""
    error: Optional[str] = None

    @property
    def cer(self) -> float:
        return float(np.mean([s["cer"] for s in self.samples])) if self.samples else math.nan

    @property
    def wer(self) -> float:
        return float(np.mean([s["wer_tokens"] for s in self.samples])) if self.samples else math.nan

    def per_font(self) -> dict:
        fonts = {}
        for s in self.samples:
            fonts.setdefault(s["font"], []).append(s["cer"])
        return {k: float(np.mean(v)) for k, v in sorted(fonts.items())}

    def aggregate(self) -> dict:
        out = {"aggregate": True, "cell": self.cell, "n": len(self.samples), "fingerprint": self.fingerprint}
        if self.error is not None:
            out["error"] = self.error
        else:
            out.update(cer=self.cer, wer=self.wer, per_font=self.per_font())
        return out

    def to_jsonl(self) -> str:
        rows = [json.dumps(s, sort_keys=True, ensure_ascii=False) for s in self.samples]
        rows.append(json.dumps(self.aggregate(), sort_keys=True, ensure_ascii=False))
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8", newline="\n")


def read_report(path) -> tuple:
    """``(samples, aggregate)`` from a JSON-lines report."""
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return rows[:-1], rows[-1]


def score_sample(sample_id: str, gt: str, pred: str, font: str) -> dict:
    return {"id": sample_id, "gt": gt, "pred": pred, "cer": sample_cer(gt, pred),
            "wer_tokens": sample_wer(gt, pred), "font": font}


def fingerprint(**parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- similarity-map heatmaps -------------------------------------------------------------
def map_to_pgm_array(m: np.ndarray) -> np.ndarray:
    """Affine map of [-1, 1] onto [0, 1] (clipped), ready for 8-bit PGM."""
    return np.clip((np.asarray(m, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def dump_maps(forward, directory, stem: str) -> list:
    """Write S, S after position encoding and S* as ``<stem>_{S,S_pe,S_star}.pgm``."""
    from .storage import write_pgm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for tag, t in (("S", forward.S), ("S_pe", forward.decoded.S_pe), ("S_star", forward.decoded.S_star)):
        p = d / f"{stem}_{tag}.pgm"
        write_pgm(p, map_to_pgm_array(t.data))
        paths.append(p)
    return paths


# -- experiment harness ------------------------------------------------------------------
VS1_CELLS = ("R", "R+B", "R+B+L", "R+B+L+I")
GRIDS = ("vs1", "vs2", "a2", "ablation")


def recognize_dataset(model, pairs, fonts: dict, alphabet=None, lm=None, beam_width: int = 1,
                      alpha: float = 1.0, beta: float = 2.0, exemplar_for=None) -> list:
    """Score ``(sample_id, sample)`` pairs; exemplars default to each sample's own font."""
    from .synth import DEFAULT_ALPHABET
    from .trainer import glyph_line_for

    alphabet = DEFAULT_ALPHABET if alphabet is None else alphabet
    cache, rows = {}, []
    with no_grad():
        for sid, sample in pairs:
            fid = exemplar_for(sample) if exemplar_for is not None else sample.font_id
            if fid not in cache:
                gl = glyph_line_for(fonts[fid], alphabet)
                cache[fid] = (gl, model.glyph_features(gl))
            gl, gf = cache[fid]
            pred = model.recognize(sample.image, gl, lm=lm, beam_width=beam_width, alpha=alpha, beta=beta,
                                   glyph_features=gf)
            rows.append(score_sample(sid, sample.text, pred, sample.font_id))
    return rows


def _dataset_pairs(data_dir: Path, split: str, limit: Optional[int]) -> list:
    from .storage import iter_dataset

    root = data_dir / split
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: dataset split not found")
    pairs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        items = list(iter_dataset(sub))
        pairs.extend(items[:limit] if limit else items)
    return pairs


def _fonts(data_dir: Path, *subdirs: str) -> dict:
    from .storage import load_fonts

    out = {}
    for sub in subdirs:
        out.update({f.font_id: f for f in load_fonts(data_dir / sub)})
    return out


def _cells(grid: str) -> list:
    from .decoder import ABLATIONS

    if grid == "vs1":
        return list(VS1_CELLS)
    if grid == "vs2":
        return ["own", "cross-selected"]
    if grid == "a2":
        return ["novel"]
    if grid == "ablation":
        return list(ABLATIONS)
    raise ValueError(f"unknown grid {grid!r}; expected one of {GRIDS}")


def run_experiment(grid: str, checkpoints: dict, data_dir, out_dir=None, limit: Optional[int] = None,
                   lm=None, beam_width: int = 1, alpha: float = 1.0, beta: float = 2.0,
                   split: Optional[str] = None) -> list:
    """Evaluate every cell of a grid; a failing cell is reported and the rest still run.

    ``checkpoints`` maps cell names to checkpoint paths; the key ``"*"``
    serves any cell without its own entry (e.g. one model read out under
    each ablation flag set).
    """
    from .decoder import ablated
    from .trainer import load_checkpoint

    data_dir = Path(data_dir)
    reports = []
    for cell in _cells(grid):
        ckpt_path = checkpoints.get(cell, checkpoints.get("*"))
        fp = fingerprint(grid=grid, cell=cell, checkpoint=str(ckpt_path), data=str(data_dir), limit=limit,
                         beam=beam_width, alpha=alpha, beta=beta, lm=lm is not None, split=split)
        report = EvalReport(cell, fingerprint=fp)
        try:
            if ckpt_path is None:
                raise FileNotFoundError(f"no checkpoint configured for cell {cell!r}")
            ckpt = load_checkpoint(ckpt_path)
            model = ckpt.model()
            kw = dict(lm=lm, beam_width=beam_width, alpha=alpha, beta=beta)
            if grid in ("vs1", "ablation"):
                if grid == "ablation":
                    model = model.with_config(ablated(model.config, cell))
                which = split or "test"
                fonts = _fonts(data_dir, "test_fonts", "fonts")
                report.samples = recognize_dataset(model, _dataset_pairs(data_dir, which, limit), fonts, **kw)
            elif grid == "vs2":
                pairs = _dataset_pairs(data_dir, split or "test", limit)
                own = _fonts(data_dir, "test_fonts")
                train_fonts = _fonts(data_dir, "fonts")
                if not train_fonts:
                    raise FileNotFoundError(f"{data_dir / 'fonts'}: no candidate fonts")
                if cell == "own":
                    report.samples = recognize_dataset(model, pairs, own, **kw)
                else:
                    candidates = [train_fonts[k] for k in sorted(train_fonts)]
                    chosen = {sid: entropy_select(model, s.image, candidates)[0] for sid, s in pairs}
                    lookup = {id(s): chosen[sid] for sid, s in pairs}
                    report.samples = recognize_dataset(model, pairs, train_fonts,
                                                       exemplar_for=lambda s: lookup[id(s)], **kw)
            else:  # a2
                fonts = _fonts(data_dir, "alphabet_fonts")
                report.samples = recognize_dataset(model, _dataset_pairs(data_dir, split or "alphabet", limit),
                                                   fonts, **kw)
        except Exception as exc:  # noqa: BLE001 - reported per cell by contract
            report.error = f"{type(exc).__name__}: {exc}"
            report.samples = []
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            report.write(Path(out_dir) / f"{grid}-{cell}.jsonl")
        reports.append(report)
    return reports
