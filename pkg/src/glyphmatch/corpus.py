"""Access to the bundled English text used for line sampling and the LM."""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from .lm import normalize_text
from .synth import DEFAULT_ALPHABET

HELD_OUT_EVERY = 10  # every tenth sentence is reserved for validation/testing


def read_lines(path: Optional[str] = None) -> list:
    if path is None:
        text = resources.files("glyphmatch").joinpath("data/corpus.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def sentences(path: Optional[str] = None, alphabet: Iterable[str] = DEFAULT_ALPHABET) -> list:
    """Corpus lines normalised to ``alphabet``; empty results are dropped."""
    out = [normalize_text(line, alphabet) for line in read_lines(path)]
    return [s for s in out if s]


def split(lines: list) -> tuple:
    """Deterministic (train, held_out) partition of corpus sentences."""
    train = [s for i, s in enumerate(lines) if i % HELD_OUT_EVERY]
    held = [s for i, s in enumerate(lines) if not i % HELD_OUT_EVERY]
    return train, held
