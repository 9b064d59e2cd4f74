"""On-disk formats: binary PGM images, font atlas directories and line datasets."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .synth import FontAtlas, TextLineSample

FONT_MANIFEST = "font.manifest"
_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale image as 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = raw[m.end() : m.end() + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return (pixels.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def save_font(directory, font: FontAtlas) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"FONT 1 {font.style} {font.font_id}"]
    for ch, img in font.glyphs.items():
        name = f"{ord(ch):04x}.pgm"
        write_pgm(d / name, img)
        lines.append(f"glyph {ord(ch):x} {img.shape[1]} {name}")
    (d / FONT_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return d


def load_font(directory) -> FontAtlas:
    d = Path(directory)
    manifest = d / FONT_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{d}: no {FONT_MANIFEST}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    head = lines[0].split(maxsplit=3) if lines else []
    if len(head) != 4 or head[0] != "FONT" or head[1] != "1":
        raise ValueError(f"{manifest}: bad header")
    glyphs = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, cp, width, rel = line.split(maxsplit=3)
        if kind != "glyph":
            raise ValueError(f"{manifest}: unexpected entry {kind!r}")
        img = read_pgm(d / rel)
        if img.shape[1] != int(width):
            raise ValueError(f"{manifest}: glyph {cp} width {img.shape[1]} != declared {width}")
        glyphs[chr(int(cp, 16))] = img
    return FontAtlas(head[3], head[2], glyphs)


def write_sample(directory, index: int, sample: TextLineSample) -> None:
    d = Path(directory)
    stem = f"{index:06d}"
    write_pgm(d / f"{stem}.pgm", sample.image)
    lines = [sample.text] + [f"{ord(c):x} {a} {b}" for c, (a, b) in zip(sample.text, sample.boxes)]
    (d / f"{stem}.gt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_dataset(directory, samples) -> int:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = 0
    for n, sample in enumerate(samples, 1):
        write_sample(d, n - 1, sample)
    return n


def read_gt(path) -> tuple:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    text = lines[0]
    boxes = []
    for line in lines[1:]:
        if line.strip():
            _, a, b = line.split()
            boxes.append((int(a), int(b)))
    if len(boxes) != len(text):
        raise ValueError(f"{path}: {len(boxes)} boxes for {len(text)} characters")
    return text, boxes


def iter_dataset(directory, font_id: Optional[str] = None) -> Iterator[tuple]:
    """Yield ``(sample_id, TextLineSample)`` in file-name order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: dataset directory not found")
    fid = d.name if font_id is None else font_id
    for gt in sorted(d.glob("*.gt")):
        text, boxes = read_gt(gt)
        yield f"{fid}/{gt.stem}", TextLineSample(read_pgm(gt.with_suffix(".pgm")), text, boxes, fid)


def read_texts(directory) -> list:
    """Ground-truth strings of every dataset under ``directory`` (recursively)."""
    return [read_gt(p)[0] for p in sorted(Path(directory).rglob("*.gt"))]


def load_fonts(directory) -> list:
    """Every font atlas in the immediate subdirectories of ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        return []
    return [load_font(p) for p in sorted(d.iterdir()) if (p / FONT_MANIFEST).is_file()]
