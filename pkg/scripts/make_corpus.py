"""Regenerate the bundled English corpus from the interpreter's own help topics.

    python3 scripts/make_corpus.py > src/glyphmatch/data/corpus.txt
"""
import re
import sys

import pydoc_data.topics as topics


def prose_sentences():
    text = "\n".join(topics.topics[k] for k in sorted(topics.topics))
    for para in re.split(r"\n\s*\n", text):
        if para.startswith("   "):  # code samples and grammar rules are indented
            continue
        flat = " ".join(para.split())
        if len(flat) < 40:
            continue
        letters = sum(c.isalpha() or c == " " for c in flat)
        if letters / len(flat) < 0.93:
            continue
        for sent in re.split(r"(?<=[.!?])\s+", flat):
            if len(sent) >= 20:
                yield sent


if __name__ == "__main__":
    seen = set()
    for s in prose_sentences():
        if s not in seen:
            seen.add(s)
            sys.stdout.write(s + "\n")
