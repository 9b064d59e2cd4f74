"""CTC loss, greedy decoding and LM-fused prefix beam search.

Frame log-probabilities are T x V with the blank (boundary) class last.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, custom_op

log = logging.getLogger(__name__)

NEG_INF = -np.inf


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target`` (a blank is forced between repeats)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_forward_backward(log_probs: np.ndarray, target: Sequence[int], blank: Optional[int] = None):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``.

    Returns ``(loss, grad, feasible)``; an infeasible target yields an infinite
    loss and a zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_classes = lp.shape
    blank = n_classes - 1 if blank is None else blank
    target = list(target)
    if any(c == blank or c < 0 or c >= n_classes for c in target):
        raise ValueError("target labels must be non-blank class indices")
    if n_frames < min_frames(target):
        return math.inf, np.zeros_like(lp), False

    ext = _extend(target, blank)
    n_states = len(ext)
    skip = np.zeros(n_states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # T x S

    alpha = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((n_frames, n_states), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if n_states > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_next = np.zeros(n_states, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_next[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    tail = alpha[-1, -1] if n_states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(tail):
        return math.inf, np.zeros_like(lp), False
    # alpha and beta both include the emission at t
    post = np.exp(alpha + beta - emit - tail)
    grad = np.zeros_like(lp)
    np.add.at(grad.T, ext, -post.T)
    return float(-tail), grad, True


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: Optional[int] = None) -> Tensor:
    """Differentiable CTC negative log-likelihood for one sequence."""
    loss, grad, feasible = ctc_forward_backward(log_probs.data, target, blank)
    if not feasible:
        log.warning("CTC target of length %d infeasible for %d frames", len(target), log_probs.shape[0])
    g = grad.astype(log_probs.dtype)
    return custom_op(np.asarray(loss, dtype=log_probs.dtype), (log_probs,), lambda up: (up * g,))


# -- decoding ----------------------------------------------------------------
def labels_to_text(labels: Sequence[int], charset: Sequence) -> str:
    """Map class indices to text; ``None`` entries (the boundary class) emit nothing."""
    return "".join(charset[k] for k in labels if charset[k] is not None)


def greedy_labels(log_probs: np.ndarray, blank: Optional[int] = None) -> list:
    lp = np.asarray(log_probs)
    blank = lp.shape[1] - 1 if blank is None else blank
    best = lp.argmax(axis=1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(log_probs: np.ndarray, charset: Sequence, blank: Optional[int] = None) -> str:
    """Per-frame argmax, collapse repeats, drop blanks."""
    return labels_to_text(greedy_labels(log_probs, blank), charset)


@dataclass
class BeamHypothesis:
    prefix: tuple
    p_blank: float = NEG_INF
    p_nonblank: float = NEG_INF
    v_blank: float = NEG_INF  # best single path, used for pruning
    v_nonblank: float = NEG_INF
    lm_score: float = 0.0
    text: str = ""

    @property
    def total(self) -> float:
        return float(np.logaddexp(self.p_blank, self.p_nonblank)) + self.lm_score

    @property
    def best_path(self) -> float:
        return max(self.v_blank, self.v_nonblank) + self.lm_score


def beam_search(
    log_probs: np.ndarray,
    charset: Sequence,
    lm=None,
    alpha: float = 1.0,
    beta: float = 2.0,
    beam_width: int = 15,
    blank: Optional[int] = None,
    bonus_per: str = "word",
    return_hypothesis: bool = False,
):
    """Prefix beam search with optional character-LM fusion.

    Extending a prefix by ``c`` adds ``alpha * log P_lm(c | context)`` and,
    when ``bonus_per == "word"``, ``beta`` on each space (``"char"`` adds it on
    every emitted character). Hypotheses are pruned by their best single
    alignment and the survivor with the largest summed prefix probability is
    returned; ties go to the lexicographically smaller prefix.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_classes = lp.shape
    blank = n_classes - 1 if blank is None else blank
    if bonus_per not in ("word", "char"):
        raise ValueError(f"bonus_per must be 'word' or 'char', got {bonus_per!r}")
    order = getattr(lm, "order", 1)
    classes = [k for k in range(n_classes) if k != blank]

    def lm_delta(text: str, k: int) -> float:
        ch = charset[k]
        if ch is None:
            return 0.0
        score = 0.0
        if lm is not None:
            ctx = text[-(order - 1):] if order > 1 else ""
            score += alpha * lm.logprob(ctx, ch)
            if bonus_per == "char" or ch == " ":
                score += beta
        return score

    beams = {(): BeamHypothesis((), p_blank=0.0, v_blank=0.0)}
    for t in range(n_frames):
        row = lp[t]
        nxt: dict = {}

        def slot(prefix, parent, k=None):
            h = nxt.get(prefix)
            if h is None:
                if k is None:
                    h = BeamHypothesis(prefix, lm_score=parent.lm_score, text=parent.text)
                else:
                    ch = charset[k]
                    h = BeamHypothesis(
                        prefix,
                        lm_score=parent.lm_score + lm_delta(parent.text, k),
                        text=parent.text + (ch if ch is not None else ""),
                    )
                nxt[prefix] = h
            return h

        for prefix, h in beams.items():
            both = np.logaddexp(h.p_blank, h.p_nonblank)
            vboth = max(h.v_blank, h.v_nonblank)
            s = slot(prefix, h)
            s.p_blank = np.logaddexp(s.p_blank, both + row[blank])
            s.v_blank = max(s.v_blank, vboth + row[blank])
            if prefix:
                last = prefix[-1]
                s.p_nonblank = np.logaddexp(s.p_nonblank, h.p_nonblank + row[last])
                s.v_nonblank = max(s.v_nonblank, h.v_nonblank + row[last])
            for k in classes:
                ext = slot(prefix + (k,), h, k)
                if prefix and k == prefix[-1]:
                    src, vsrc = h.p_blank, h.v_blank
                else:
                    src, vsrc = both, vboth
                ext.p_nonblank = np.logaddexp(ext.p_nonblank, src + row[k])
                ext.v_nonblank = max(ext.v_nonblank, vsrc + row[k])
        ranked = sorted(nxt.values(), key=lambda b: (-b.best_path, b.prefix))
        beams = {b.prefix: b for b in ranked[:beam_width] if np.isfinite(b.best_path)}
    best = min(beams.values(), key=lambda b: (-b.total, b.prefix))
    if return_hypothesis:
        return best
    return labels_to_text(best.prefix, charset)
