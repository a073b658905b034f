"""Byte-level corpus handling: tokenizer, text IO, packing, splits.

The on-disk corpus format is UTF-8 plain text, one document per line.
Tokens are raw bytes (ids 0..255) plus two specials: BOS (prepended to
prompts so decoding always has a start token) and SEP (document separator
used when packing). vocab_size is therefore 258.

Packing concatenates documents with SEP into fixed-length windows. The
window array is paired with the SEP positions so loss construction can drop
prediction pairs that would cross a document boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "BOS_ID",
    "SEP_ID",
    "VOCAB_SIZE",
    "ByteTokenizer",
    "Corpus",
    "load_corpus",
    "save_corpus",
    "pack_windows",
    "split_corpus",
]

BOS_ID = 256
SEP_ID = 257
VOCAB_SIZE = 258


@dataclass(frozen=True)
class ByteTokenizer:
    """Raw-byte tokenizer with BOS/SEP specials."""

    vocab_size: int = VOCAB_SIZE

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)

    def decode(self, ids) -> str:
        ids = np.asarray(ids)
        plain = ids[(ids >= 0) & (ids < 256)].astype(np.uint8)
        return plain.tobytes().decode("utf-8", errors="replace")


@dataclass
class Corpus:
    """A list of token-id documents plus the tokenizer that produced them."""

    documents: list[np.ndarray]
    tokenizer: ByteTokenizer = field(default_factory=ByteTokenizer)

    def __post_init__(self):
        for i, doc in enumerate(self.documents):
            doc = np.asarray(doc, dtype=np.int32)
            if doc.size and (doc.min() < 0 or doc.max() >= self.tokenizer.vocab_size):
                raise ValueError(f"document {i} has token ids outside the vocabulary")
            self.documents[i] = doc

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def total_tokens(self) -> int:
        return int(sum(len(d) for d in self.documents))


def load_corpus(path, tokenizer: ByteTokenizer | None = None) -> Corpus:
    """One document per non-empty line of UTF-8 text."""
    tokenizer = tokenizer or ByteTokenizer()
    docs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            docs.append(tokenizer.encode(line))
    return Corpus(documents=docs, tokenizer=tokenizer)


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [corpus.tokenizer.decode(doc) for doc in corpus.documents]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def pack_windows(corpus: Corpus, window_len: int) -> np.ndarray:
    """Concatenate documents with SEP and cut into (N, window_len) windows.

    The trailing partial window is dropped. Raises if the corpus is too
    small to fill a single window.
    """
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    stream = []
    for doc in corpus.documents:
        stream.append(doc)
        stream.append(np.array([SEP_ID], dtype=np.int32))
    flat = np.concatenate(stream) if stream else np.empty(0, dtype=np.int32)
    n_windows = len(flat) // window_len
    if n_windows == 0:
        raise ValueError(
            f"corpus has {len(flat)} tokens, not enough for one window of {window_len}"
        )
    return flat[: n_windows * window_len].reshape(n_windows, window_len)


def split_corpus(corpus: Corpus, val_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Deterministic document-level train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(corpus.documents))
    n_val = max(1, int(round(len(order) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [corpus.documents[i] for i in range(len(order)) if i not in val_idx]
    val = [corpus.documents[i] for i in sorted(val_idx)]
    return (
        Corpus(documents=train, tokenizer=corpus.tokenizer),
        Corpus(documents=val, tokenizer=corpus.tokenizer),
    )
