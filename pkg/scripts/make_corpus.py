#!/usr/bin/env python3
"""Regenerate the bundled training corpus (data/corpus.txt), ~1MB.

The corpus is synthetic but deliberately text-like: a small template grammar
over a fixed English vocabulary, sampled with a seeded generator so the file
is reproducible bit for bit. Character-level models pick up word spellings
quickly, word transitions more slowly, and template structure last, which
gives per-offset prediction accuracy the decaying shape the profiling and
benchmark tools expect from real text.

Usage: python3 scripts/make_corpus.py [--bytes N] [--seed S] [--out PATH]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

DETERMINERS = ["the", "a", "every", "this", "that", "each", "some", "one"]
ADJECTIVES = [
    "old", "small", "quiet", "bright", "heavy", "green", "long", "warm",
    "narrow", "simple", "steady", "rough", "pale", "deep", "early", "plain",
]
NOUNS = [
    "river", "house", "garden", "window", "mountain", "letter", "road",
    "forest", "table", "village", "stone", "harbor", "lamp", "market",
    "bridge", "field", "winter", "morning", "teacher", "child", "boat",
    "door", "station", "valley", "cloud", "engine", "island", "corner",
]
VERBS = [
    "crossed", "opened", "followed", "watched", "carried", "reached",
    "covered", "filled", "held", "turned", "passed", "touched", "found",
    "left", "moved", "faced",
]
INTRANSITIVE = [
    "waited", "slept", "vanished", "arrived", "settled", "stood", "fell",
    "remained", "drifted", "stopped",
]
ADVERBS = ["slowly", "quietly", "again", "soon", "often", "finally", "almost", "still"]
CONNECTIVES = ["and", "but", "while", "because", "until", "although"]
PLACES = [
    "near the water", "by the old wall", "under the trees", "past the mill",
    "at the edge of town", "behind the hill", "along the shore",
    "beyond the fence",
]


def _pick(rng, items):
    # mildly zipfian: early list entries come up more often
    weights = 1.0 / np.arange(1, len(items) + 1) ** 0.7
    return items[rng.choice(len(items), p=weights / weights.sum())]


def noun_phrase(rng) -> str:
    det = _pick(rng, DETERMINERS)
    if rng.random() < 0.45:
        return f"{det} {_pick(rng, ADJECTIVES)} {_pick(rng, NOUNS)}"
    return f"{det} {_pick(rng, NOUNS)}"


def clause(rng) -> str:
    if rng.random() < 0.6:
        out = f"{noun_phrase(rng)} {_pick(rng, VERBS)} {noun_phrase(rng)}"
    else:
        out = f"{noun_phrase(rng)} {_pick(rng, INTRANSITIVE)}"
    if rng.random() < 0.35:
        out += f" {_pick(rng, ADVERBS)}"
    if rng.random() < 0.3:
        out += f" {_pick(rng, PLACES)}"
    return out


def sentence(rng) -> str:
    text = clause(rng)
    if rng.random() < 0.3:
        text += f" {_pick(rng, CONNECTIVES)} {clause(rng)}"
    return text[0].upper() + text[1:] + "."


def document(rng) -> str:
    return " ".join(sentence(rng) for _ in range(int(rng.integers(1, 5))))


def build(target_bytes: int, seed: int) -> str:
    rng = np.random.default_rng(seed)
    lines = []
    size = 0
    while size < target_bytes:
        line = document(rng)
        lines.append(line)
        size += len(line) + 1
    return "\n".join(lines) + "\n"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bytes", type=int, default=1_000_000)
    parser.add_argument("--seed", type=int, default=20240601)
    parser.add_argument("--out", default=Path(__file__).resolve().parents[1] / "data" / "corpus.txt")
    args = parser.parse_args()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = build(args.bytes, args.seed)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {len(text.encode('utf-8'))} bytes, {text.count(chr(10))} documents -> {out}")


if __name__ == "__main__":
    main()
