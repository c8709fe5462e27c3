"""Synthetic paired-image probing tasks, the character tokenizer and prompt templates.

Every renderer is a pure function of its seed. A pair differs only in the
attribute its task probes, so the pixel difference between ``target`` and
``source`` always lies inside the drawn glyphs/objects.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from vflkit.font import GLYPH_H, GLYPH_W, OBJECT_KINDS, OBJECTS, glyph

TASKS = ("ocr", "grounding", "count", "recognition")

PROMPTS = {
    "ocr": "what is written",
    "grounding": "where is the square",
    "count": "how many squares",
    "recognition": "is there a {kind}",
}

WORDS = (
    "able acid aged also area army away baby back ball band bank base bath bear beat "
    "bell belt best bird blow blue boat body bone book born both bowl busy cake calm "
    "came camp card care case cash cast cell chat chip city club coal coat code cold "
    "come cook cool copy core cost crew crop dark data date dawn days dead deal dear "
    "deep desk diet disk dock door dose down draw drop drum duck dust duty each earn "
    "east easy edge else even ever exit face fact fair fall farm fast fate fear feed "
    "feel file fill film find fine fire firm fish five flag flat flow food foot fork "
    "form four free frog fuel full fund gain game gate gift girl give glad goal gold "
    "golf good grey grow hair half hall hand hard harm hate have head heat held help "
    "hero hide high hill hint hold hole home hope horn host hour huge idea inch iron "
    "item jazz join joke jump jury just keen keep kick kind king kiss knee know lack "
    "ant bee cat cow dog elk fox hen owl pig rat yak zoo sky sun "
    "apple bread chair dream earth flame grape heart juice lemon magic night ocean "
    "piano quiet river stone tiger voice water youth zebra"
).split()

CHARS = "abcdefghijklmnopqrstuvwxyz0123456789 ,"


class TokenizeError(ValueError):
    pass


class GenerationError(ValueError):
    pass


class Tokenizer:
    """Fixed character vocabulary.

    Ids: PAD=0, BOS=1, EOS=2, IMG=3, then ``a``-``z``, ``0``-``9``, space and
    comma, then reserved slots up to ``vocab_size``. ``encode`` never adds
    specials; the sequence builder puts BOS after the prompt (it triggers the
    answer stream) and EOS after the answer. ``decode`` drops PAD/BOS/IMG, stops at
    the first EOS and spells reserved ids as ``<rN>`` (so a model emitting one
    yields an unparseable answer instead of an exception).
    """

    PAD, BOS, EOS, IMG = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<img>")

    def __init__(self, vocab_size: int = 72):
        n_used = len(self.SPECIALS) + len(CHARS)
        if vocab_size < n_used:
            raise ValueError(f"vocab_size must be >= {n_used}")
        self.vocab_size = vocab_size
        self.itos = list(self.SPECIALS) + list(CHARS)
        self.itos += [f"<r{i}>" for i in range(vocab_size - n_used)]
        self.stoi = {c: i for i, c in enumerate(self.itos) if len(c) == 1}

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as e:
            raise TokenizeError(f"out-of-vocabulary character {e.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.EOS:
                break
            if i in (self.PAD, self.BOS, self.IMG):
                continue
            if not 0 <= i < len(self.itos):
                raise TokenizeError(f"token id {i} outside the vocabulary")
            out.append(self.itos[i])
        return "".join(out)


@dataclass
class PairedSample:
    task: str
    target: np.ndarray
    source: np.ndarray
    prompt: str
    target_truth: str
    source_truth: str
    seed: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def prompt_ids(self, tok: Tokenizer) -> list[int]:
        return tok.encode(self.prompt)


def blank_canvas(image_size: int = 32, channels: int = 1) -> np.ndarray:
    return np.zeros((image_size, image_size, channels), dtype=np.float32)


def _maybe_flip(s: PairedSample, rng: np.random.Generator, flip: bool) -> PairedSample:
    if flip and rng.random() < 0.5:
        s.target, s.source = s.source, s.target
        s.target_truth, s.source_truth = s.source_truth, s.target_truth
        s.metadata["flipped"] = True
    return s


# -- OCR ---------------------------------------------------------------------

OCR_ORIGIN = (12, 1)  # (row, col) of the first glyph's top-left pixel


def draw_word(canvas: np.ndarray, word: str, origin: tuple[int, int] = OCR_ORIGIN) -> np.ndarray:
    r0, c0 = origin
    h, w = canvas.shape[:2]
    if c0 + len(word) * (GLYPH_W + 1) - 1 > w or r0 + GLYPH_H > h:
        raise GenerationError(f"word {word!r} does not fit a {w}px canvas")
    for i, ch in enumerate(word):
        c = c0 + i * (GLYPH_W + 1)
        canvas[r0:r0 + GLYPH_H, c:c + GLYPH_W, :] = np.maximum(
            canvas[r0:r0 + GLYPH_H, c:c + GLYPH_W, :], glyph(ch)[:, :, None])
    return canvas


def render_ocr_pair(seed: int, image_size: int = 32, channels: int = 1,
                    words: tuple[str, ...] = WORDS, flip: bool = False) -> PairedSample:
    if not words:
        raise GenerationError("empty word list")
    rng = np.random.default_rng(seed)
    i, j = rng.choice(len(words), size=2, replace=False)
    tw, sw = words[i], words[j]
    target = draw_word(blank_canvas(image_size, channels), tw)
    source = draw_word(blank_canvas(image_size, channels), sw)
    s = PairedSample("ocr", target, source, PROMPTS["ocr"], tw, sw, seed,
                     {"target_word": int(i), "source_word": int(j)})
    return _maybe_flip(s, rng, flip)


# -- grounding ---------------------------------------------------------------

def format_box(box: tuple[int, int, int, int]) -> str:
    return ",".join(str(v) for v in box)


def parse_box(text: str) -> tuple[int, int, int, int] | None:
    parts = text.split(",")
    if len(parts) != 4 or not all(p.isdigit() for p in parts):
        return None
    x1, y1, x2, y2 = (int(p) for p in parts)
    if x1 > x2 or y1 > y2:
        return None
    return x1, y1, x2, y2


def _fill_cell(canvas: np.ndarray, cx: int, cy: int, patch: int) -> None:
    canvas[cy * patch:(cy + 1) * patch, cx * patch:(cx + 1) * patch, :] = 1.0


def render_grounding_pair(seed: int, image_size: int = 32, patch_size: int = 8,
                          channels: int = 1, flip: bool = False) -> PairedSample:
    rng = np.random.default_rng(seed)
    g = image_size // patch_size
    a, b = rng.choice(g * g, size=2, replace=False)
    cells = [(int(a % g), int(a // g)), (int(b % g), int(b // g))]
    imgs = []
    for cx, cy in cells:
        c = blank_canvas(image_size, channels)
        _fill_cell(c, cx, cy, patch_size)
        imgs.append(c)
    (tx, ty), (sx, sy) = cells
    s = PairedSample("grounding", imgs[0], imgs[1], PROMPTS["grounding"],
                     format_box((tx, ty, tx, ty)), format_box((sx, sy, sx, sy)), seed,
                     {"target_cell": [tx, ty], "source_cell": [sx, sy]})
    return _maybe_flip(s, rng, flip)


# -- counting ----------------------------------------------------------------

COUNT_MAX = 6
COUNT_SQUARE = 4


def draw_squares(canvas: np.ndarray, cells: list[int], offsets: np.ndarray, patch: int) -> None:
    g = canvas.shape[1] // patch
    for cell, (oy, ox) in zip(cells, offsets):
        cy, cx = divmod(int(cell), g)
        r, c = cy * patch + int(oy), cx * patch + int(ox)
        canvas[r:r + COUNT_SQUARE, c:c + COUNT_SQUARE, :] = 1.0


def render_count_pair(seed: int, image_size: int = 32, patch_size: int = 8,
                      channels: int = 1, flip: bool = False) -> PairedSample:
    rng = np.random.default_rng(seed)
    g = image_size // patch_size
    n, m = (int(v) for v in rng.choice(np.arange(1, COUNT_MAX + 1), size=2, replace=False))
    if max(n, m) > g * g:
        raise GenerationError(f"count {max(n, m)} exceeds {g * g} free cells")
    # Squares sit at offsets 1..patch-COUNT_SQUARE-1 so neighbours never touch.
    hi = patch_size - COUNT_SQUARE
    cells = rng.permutation(g * g)[:max(n, m)]
    offsets = rng.integers(1, hi, size=(max(n, m), 2))
    target, source = blank_canvas(image_size, channels), blank_canvas(image_size, channels)
    # The smaller count is a prefix of the larger one: the pair differs only in extra squares.
    draw_squares(target, list(cells[:n]), offsets[:n], patch_size)
    draw_squares(source, list(cells[:m]), offsets[:m], patch_size)
    s = PairedSample("count", target, source, PROMPTS["count"], str(n), str(m), seed,
                     {"target_count": n, "source_count": m,
                      "cells": [int(c) for c in cells], "offsets": offsets.tolist()})
    return _maybe_flip(s, rng, flip)


# -- recognition -------------------------------------------------------------

def draw_object(canvas: np.ndarray, kind: str, row: int, col: int) -> None:
    stencil = OBJECTS[kind]
    h, w = stencil.shape
    region = canvas[row:row + h, col:col + w, :]
    region[...] = np.maximum(region, stencil[:, :, None])


def render_recognition_pair(seed: int, image_size: int = 32, channels: int = 1,
                            kinds: tuple[str, ...] = OBJECT_KINDS,
                            flip: bool = False) -> PairedSample:
    rng = np.random.default_rng(seed)
    kind = kinds[int(rng.integers(len(kinds)))]
    size = OBJECTS[kind].shape[0]
    row, col = (int(v) for v in rng.integers(0, image_size - size + 1, size=2))
    target = blank_canvas(image_size, channels)
    draw_object(target, kind, row, col)
    s = PairedSample("recognition", target, blank_canvas(image_size, channels),
                     PROMPTS["recognition"].format(kind=kind), "yes", "no", seed,
                     {"kind": kind, "row": row, "col": col})
    return _maybe_flip(s, rng, flip)


RENDERERS = {
    "ocr": render_ocr_pair,
    "grounding": render_grounding_pair,
    "count": render_count_pair,
    "recognition": render_recognition_pair,
}


def render_pair(task: str, seed: int, **kw: Any) -> PairedSample:
    if task not in RENDERERS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return RENDERERS[task](seed, **kw)


def make_pairs(task: str, n: int, seed: int, **kw: Any) -> list[PairedSample]:
    """``n`` pairs for ``task`` with per-sample seeds derived from ``seed``."""
    seeds = np.random.default_rng([seed, TASKS.index(task)]).integers(0, 2**31 - 1, size=n)
    return [render_pair(task, int(s), **kw) for s in seeds]


def training_example(task: str, seed: int, image_size: int = 32,
                     patch_size: int = 8) -> tuple[np.ndarray, str, str]:
    """One (image, prompt, answer) drawn from a pair; recognition also asks about absent kinds."""
    kw = {"image_size": image_size}
    if task in ("grounding", "count"):
        kw["patch_size"] = patch_size
    s = render_pair(task, seed, **kw)
    rng = np.random.default_rng([seed, 7])
    if task == "recognition":
        roll = rng.integers(3)
        if roll == 0:
            return s.target, s.prompt, "yes"
        if roll == 1:
            return s.source, s.prompt, "no"
        kind = s.metadata["kind"]
        other = [k for k in OBJECT_KINDS if k != kind]
        return s.target, PROMPTS["recognition"].format(kind=other[rng.integers(len(other))]), "no"
    if rng.random() < 0.5:
        return s.target, s.prompt, s.target_truth
    return s.source, s.prompt, s.source_truth


# -- independent pixel-scanning oracles --------------------------------------

def scan_box(img: np.ndarray, patch_size: int) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(img.max(axis=2) > 0)
    return (int(xs.min()) // patch_size, int(ys.min()) // patch_size,
            int(xs.max()) // patch_size, int(ys.max()) // patch_size)


def count_components(img: np.ndarray) -> int:
    """4-connected components of lit pixels, by flood fill."""
    lit = img.max(axis=2) > 0
    seen = np.zeros_like(lit)
    h, w = lit.shape
    n = 0
    for r in range(h):
        for c in range(w):
            if lit[r, c] and not seen[r, c]:
                n += 1
                stack = [(r, c)]
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and lit[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            stack.append((yy, xx))
    return n


def read_word(img: np.ndarray, origin: tuple[int, int] = OCR_ORIGIN) -> str:
    """Template-match glyph cells left to right until a blank cell."""
    r0, c0 = origin
    out = []
    plane = img.max(axis=2)
    c = c0
    while c + GLYPH_W <= plane.shape[1]:
        cell = plane[r0:r0 + GLYPH_H, c:c + GLYPH_W]
        if not cell.any():
            break
        hits = [ch for ch in sorted(_GLYPH_CACHE) if np.array_equal(_GLYPH_CACHE[ch], cell)]
        if len(hits) != 1:
            raise GenerationError("unreadable glyph cell")
        out.append(hits[0])
        c += GLYPH_W + 1
    return "".join(out)


_GLYPH_CACHE = {ch: glyph(ch) for ch in "abcdefghijklmnopqrstuvwxyz"}


# -- JSON-lines export -------------------------------------------------------

def _pix_to_b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _pix_from_b64(s: str, shape: list[int]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float32)


def sample_to_record(s: PairedSample, sample_id: int) -> dict[str, Any]:
    """Fields: id, task, seed, prompt, target_truth, source_truth, shape [H,W,C],
    target_pixels / source_pixels (base64 of row-major little-endian float32), metadata."""
    return {
        "id": sample_id,
        "task": s.task,
        "seed": s.seed,
        "prompt": s.prompt,
        "target_truth": s.target_truth,
        "source_truth": s.source_truth,
        "shape": list(s.target.shape),
        "target_pixels": _pix_to_b64(s.target),
        "source_pixels": _pix_to_b64(s.source),
        "metadata": s.metadata,
    }


def record_to_sample(rec: dict[str, Any]) -> PairedSample:
    shape = rec["shape"]
    return PairedSample(rec["task"], _pix_from_b64(rec["target_pixels"], shape),
                        _pix_from_b64(rec["source_pixels"], shape), rec["prompt"],
                        rec["target_truth"], rec["source_truth"], rec["seed"],
                        dict(rec.get("metadata", {})))


def write_jsonl(samples: Iterable[PairedSample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, s in enumerate(samples):
            f.write(json.dumps(sample_to_record(s, i), sort_keys=True, separators=(",", ":")))
            f.write("\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[tuple[int, PairedSample]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                yield rec["id"], record_to_sample(rec)
