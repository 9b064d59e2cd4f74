"""Character n-gram language model with add-k smoothing and hard backoff."""
from __future__ import annotations

import math
import re
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

BOS = "\x02"  # sentence-start padding, never predicted
MAGIC = "NGLM"
VERSION = 1


def normalize_text(text: str, alphabet: Optional[Iterable[str]] = None) -> str:
    """Lowercase; characters outside ``alphabet`` become spaces, runs collapse."""
    text = text.lower()
    if alphabet is not None:
        allowed = set(alphabet)
        text = "".join(c if c in allowed else " " for c in text)
    return re.sub(r" +", " ", text).strip()


class NGramLM:
    def __init__(self, order: int, vocab: Sequence[str], k: float = 0.1):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.k = float(k)
        self.vocab = sorted(set(vocab))
        self._vocab_set = set(self.vocab)
        # counts[m][context][char], context of length m - 1
        self.counts: list = [None] + [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
        self.context_totals: list = [None] + [defaultdict(int) for _ in range(order)]

    def add_count(self, m: int, context: str, char: str, n: int = 1) -> None:
        self.counts[m][context][char] += n
        self.context_totals[m][context] += n

    def train_line(self, line: str) -> None:
        padded = BOS * (self.order - 1) + line
        start = self.order - 1
        for i in range(start, len(padded)):
            ch = padded[i]
            for m in range(1, self.order + 1):
                self.add_count(m, padded[i - m + 1 : i], ch)

    def logprob(self, context: str, char: str) -> float:
        """log P(char | context), backing off while the context is unseen."""
        if char not in self._vocab_set:
            raise KeyError(f"character {char!r} not in LM vocabulary")
        context = (BOS * self.order + context)[-(self.order - 1):] if self.order > 1 else ""
        kv = self.k * len(self.vocab)
        for m in range(self.order, 0, -1):
            ctx = context[len(context) - (m - 1):] if m > 1 else ""
            total = self.context_totals[m].get(ctx, 0)
            if total > 0 or m == 1:
                num = self.counts[m][ctx].get(char, 0) if ctx in self.counts[m] else 0
                return math.log((num + self.k) / (total + kv))
        raise AssertionError("unreachable")

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        lines = [f"{MAGIC} {VERSION} {self.order} {self.k!r} {len(self.vocab)}"]
        lines += [f"{ord(c):x}" for c in self.vocab]
        for m in range(1, self.order + 1):
            for ctx in sorted(self.counts[m]):
                ctx_hex = "+".join(f"{ord(c):x}" for c in ctx) or "-"
                for ch in sorted(self.counts[m][ctx]):
                    lines.append(f"{m} {ctx_hex} {ord(ch):x} {self.counts[m][ctx][ch]}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "NGramLM":
        text = Path(path).read_text(encoding="utf-8").split("\n")
        head = text[0].split()
        if len(head) != 5 or head[0] != MAGIC:
            raise ValueError(f"{path}: not an n-gram LM file")
        if int(head[1]) != VERSION:
            raise ValueError(f"{path}: unsupported LM version {head[1]}")
        order, k, nvocab = int(head[2]), float(head[3]), int(head[4])
        vocab = [chr(int(h, 16)) for h in text[1 : 1 + nvocab]]
        lm = cls(order, vocab, k)
        for line in text[1 + nvocab :]:
            if not line:
                continue
            m, ctx_hex, ch_hex, n = line.split()
            ctx = "" if ctx_hex == "-" else "".join(chr(int(h, 16)) for h in ctx_hex.split("+"))
            lm.add_count(int(m), ctx, chr(int(ch_hex, 16)), int(n))
        return lm


def train_lm(corpus: Iterable[str], order: int = 6, alphabet: Optional[Iterable[str]] = None, k: float = 0.1) -> NGramLM:
    """Count n-grams of every order up to ``order`` over the corpus lines."""
    alphabet = list(alphabet) if alphabet is not None else None
    lines = [normalize_text(line, alphabet) for line in corpus]
    lines = [line for line in lines if line]
    if not lines:
        raise ValueError("corpus is empty after normalisation")
    vocab = set(alphabet or ()) | {c for line in lines for c in line}
    lm = NGramLM(order, vocab, k)
    for line in lines:
        lm.train_line(line)
    return lm
