"""Greedy self-speculative decoding: AR baseline, MTP, F-MTP and leap drafts.

One decode round is draft -> verify -> accept:

* drafting applies the prediction heads to hidden rows the model has already
  produced. MTP uses only the row at the current tip (offsets 1..n). The
  leap strategy fills the gaps between leap offsets by *looking backward*:
  the row cached from j steps ago already carries head predictions for the
  missing positions, so a stride-k model keeps the last k-1 hidden rows and
  drafts k*(n-1)+1 consecutive tokens with no extra backbone pass. F-MTP
  fills gaps *forward* instead, spending k-1 extra single-token passes to
  condition low heads on freshly drafted tokens.
* verification scores all drafted tokens in one batched pass and accepts the
  longest prefix that matches the base head's greedy choice at every step.
  The round always emits at least one token: the base head's own pick at the
  first mismatch (the bonus token when nothing mismatches).
* acceptance commits KV rows for the accepted tokens, then runs a single
  token pass for the correction so the state again holds the hidden row at
  the last emitted position. Rejected tokens leave no trace.

Greedy acceptance makes every strategy reproduce autoregressive greedy
decoding token for token; the stats only change how fast it got there.
Argmax decisions are taken on float64 head logits to keep the comparison
between batched verification and one-at-a-time decoding stable.
"""

from __future__ import annotations

import csv
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import KvCache, PredictionHead, TransformerLM, causal_mask, head_logits

__all__ = [
    "DecodeState",
    "DraftCandidates",
    "DecodeStats",
    "STRATEGIES",
    "prefill",
    "ar_decode",
    "draft_mtp",
    "draft_lmtp",
    "draft_fmtp",
    "verify_accept",
    "decode_loop",
    "write_stats_csv",
]

STRATEGIES = ("ar", "mtp", "fmtp", "lmtp", "lmtp+tree")


# ---------------------------------------------------------------------------
# state and bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class DecodeState:
    """Single-owner state of one decode loop.

    ``recent_hidden`` holds the final-layer rows at the last min(k, len)
    positions, newest last; entry -1 is the tip (the last accepted position)
    and entries before it are the backward-looking ring.
    """

    cache: KvCache
    tokens: list[int]
    recent_hidden: list[np.ndarray]
    rng: np.random.Generator

    @property
    def accepted_count(self) -> int:
        return len(self.tokens)

    @property
    def tip_hidden(self) -> np.ndarray:
        return self.recent_hidden[-1]

    def hidden_at_back(self, steps_back: int) -> np.ndarray:
        """Row at the position ``steps_back`` before the tip (0 = tip)."""
        if steps_back >= len(self.recent_hidden):
            raise ValueError(
                f"no cached hidden row {steps_back} steps back "
                f"(have {len(self.recent_hidden)})"
            )
        return self.recent_hidden[-1 - steps_back]


@dataclass
class DraftCandidates:
    """Per-position draft distributions plus provenance.

    ``sources[i]`` is (head index, step delta): delta 0 means the head ran on
    the tip row, -j on the row j steps back, +j on a speculative row j steps
    ahead. ``backbone_passes`` counts extra passes spent building the draft.
    """

    logits: np.ndarray  # (L, vocab) float64
    sources: list[tuple[int, int]]
    backbone_passes: int = 0

    def __len__(self) -> int:
        return len(self.sources)

    def greedy_tokens(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    def top_tokens(self, ranks: int) -> np.ndarray:
        """(L, ranks) token ids ordered best-first per position."""
        order = np.argsort(-self.logits, axis=1, kind="stable")
        return order[:, :ranks]


@dataclass
class DecodeStats:
    strategy: str
    tokens_emitted: int = 0
    verification_passes: int = 0
    model_passes: int = 0
    accept_histogram: Counter = field(default_factory=Counter)
    wall_seconds: float = 0.0

    @property
    def mean_accept_length(self) -> float:
        if self.verification_passes == 0:
            return 0.0
        return self.tokens_emitted / self.verification_passes

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens_emitted / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def record_round(self, emitted: int, model_passes: int) -> None:
        self.tokens_emitted += emitted
        self.verification_passes += 1
        self.model_passes += model_passes
        self.accept_histogram[emitted] += 1

    def validate(self) -> None:
        assert sum(self.accept_histogram.values()) == self.verification_passes
        assert sum(k * v for k, v in self.accept_histogram.items()) == self.tokens_emitted
        if self.verification_passes:
            assert self.mean_accept_length >= 1.0


def _logits64(row: np.ndarray, head: PredictionHead) -> np.ndarray:
    return head_logits(row.astype(np.float64), head)


def _argmax64(row: np.ndarray, head: PredictionHead) -> int:
    return int(np.argmax(_logits64(row, head)))


# ---------------------------------------------------------------------------
# prefill and the autoregressive baseline
# ---------------------------------------------------------------------------


def prefill(model: TransformerLM, prompt, seed: int = 0) -> DecodeState:
    """Run the prompt once and set up the hidden-row ring.

    The prompt must hold at least max(leap_stride, 1) tokens so the ring can
    bootstrap from prompt rows (a BOS-led prompt satisfies this for k <= 2).
    """
    prompt = [int(t) for t in np.asarray(prompt).ravel()]
    keep = max(model.config.leap_stride, 1)
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty (at least a start token)")
    if len(prompt) < keep:
        raise ValueError(
            f"prompt of {len(prompt)} tokens cannot bootstrap a stride-"
            f"{model.config.leap_stride} hidden ring; need >= {keep}"
        )
    hidden, cache = model.forward(
        prompt, np.arange(len(prompt)), causal_mask(len(prompt))
    )
    return DecodeState(
        cache=cache,
        tokens=prompt,
        recent_hidden=[hidden[i] for i in range(len(prompt) - keep, len(prompt))],
        rng=np.random.default_rng(seed),
    )


def _append_rows(state: DecodeState, rows: list[np.ndarray]) -> None:
    keep = len(state.recent_hidden)
    state.recent_hidden = (state.recent_hidden + rows)[-keep:]


def ar_decode(
    model: TransformerLM,
    prompt,
    max_new: int,
    mode: str = "greedy",
    eos_id: int | None = None,
) -> tuple[list[int], DecodeStats]:
    """One token per pass from the base head; the losslessness oracle and
    the speedup denominator. Returns prompt + continuation."""
    if mode != "greedy":
        raise NotImplementedError("only greedy decoding is implemented")
    stats = DecodeStats(strategy="ar")
    start = time.perf_counter()
    state = prefill(model, prompt)
    stats.model_passes += 1
    base = model.heads[0]
    for _ in range(max_new):
        token = _argmax64(state.tip_hidden, base)
        pos = len(state.tokens)
        hidden, state.cache = model.forward(
            [token], [pos], causal_mask(1, state.cache.length), state.cache
        )
        state.tokens.append(token)
        _append_rows(state, [hidden[0]])
        stats.record_round(emitted=1, model_passes=1)
        if eos_id is not None and token == eos_id:
            break
    stats.wall_seconds = time.perf_counter() - start
    stats.validate()
    return list(state.tokens), stats


# ---------------------------------------------------------------------------
# drafting
# ---------------------------------------------------------------------------


def _head_for_offset(offset: int, stride: int) -> int:
    """Head index whose leap offset is ``offset`` (offset must be = 1 mod k)."""
    assert (offset - 1) % stride == 0
    return (offset - 1) // stride + 1


def draft_mtp(model: TransformerLM, state: DecodeState) -> DraftCandidates:
    """All heads on the tip row: contiguous offsets 1..n from step t."""
    heads = model.heads
    tip = state.tip_hidden.astype(np.float64)
    logits = np.stack([head_logits(tip, head) for head in heads])
    return DraftCandidates(
        logits=logits, sources=[(h.head_index, 0) for h in heads]
    )


def draft_lmtp(model: TransformerLM, state: DecodeState) -> DraftCandidates:
    """Backward-looking draft: position i comes from the unique cached row
    that a leap head can serve, ((1-i) mod k) steps back from the tip. For
    k=2 this is the familiar interleave: odd offsets from step t, even
    offsets from step t-1. Costs no backbone pass; the t-1 (and older)
    contributions are retrieved, not recomputed."""
    cfg = model.config
    k, n = cfg.leap_stride, cfg.n_pred_heads
    heads = model.heads
    length = k * (n - 1) + 1
    rows64 = [row.astype(np.float64) for row in state.recent_hidden]
    logits = np.empty((length, cfg.vocab_size), dtype=np.float64)
    sources: list[tuple[int, int]] = []
    for i in range(1, length + 1):
        back = (1 - i) % k
        head = heads[_head_for_offset(i + back, k) - 1]
        if back >= len(rows64):
            raise ValueError(f"missing cached hidden row {back} steps back")
        logits[i - 1] = head_logits(rows64[-1 - back], head)
        sources.append((head.head_index, -back))
    return DraftCandidates(logits=logits, sources=sources)


def draft_fmtp(model: TransformerLM, state: DecodeState) -> DraftCandidates:
    """Forward-filling draft: gaps are served by lower heads run at future
    steps, so k-1 speculative single-token passes extend the tip before the
    heads fire. Covers offsets 1..k*n; the speculative cache rows are
    dropped after drafting."""
    cfg = model.config
    k, n = cfg.leap_stride, cfg.n_pred_heads
    if k == 1:
        return draft_mtp(model, state)
    heads = model.heads
    base = heads[0]
    step_rows = [state.tip_hidden]
    spec_cache = state.cache
    passes = 0
    for j in range(1, k):
        token = _argmax64(step_rows[-1], base)
        hidden, spec_cache = model.forward(
            [token],
            [len(state.tokens) + j - 1],
            causal_mask(1, spec_cache.length),
            spec_cache,
        )
        step_rows.append(hidden[0])
        passes += 1
    rows64 = [row.astype(np.float64) for row in step_rows]
    length = k * n
    logits = np.empty((length, cfg.vocab_size), dtype=np.float64)
    sources: list[tuple[int, int]] = []
    for i in range(1, length + 1):
        ahead = (i - 1) % k
        head = heads[_head_for_offset(i - ahead, k) - 1]
        logits[i - 1] = head_logits(rows64[ahead], head)
        sources.append((head.head_index, ahead))
    return DraftCandidates(logits=logits, sources=sources, backbone_passes=passes)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def verify_accept(
    model: TransformerLM,
    drafts,
    state: DecodeState,
    max_emit: int | None = None,
    eos_id: int | None = None,
) -> tuple[list[int], int]:
    """Score drafted tokens in one pass, accept the longest greedy-matching
    prefix, emit it plus the base head's token at the first mismatch.

    Commits cache rows for exactly the emitted tokens (accepted drafts from
    the scoring pass, the correction via one single-token pass) and advances
    the hidden ring. Returns (emitted tokens, backbone passes used).
    """
    drafts = [int(t) for t in np.asarray(drafts).ravel()]
    length = len(drafts)
    if length == 0:
        raise ValueError("need at least one drafted token")
    base = model.heads[0]
    start_len = state.cache.length
    positions = np.arange(start_len, start_len + length)
    hidden, ext_cache = model.forward(
        drafts, positions, causal_mask(length, start_len), state.cache
    )
    passes = 1
    arg = np.argmax(head_logits(hidden.astype(np.float64), base), axis=1)

    refs = [_argmax64(state.tip_hidden, base)] + [int(a) for a in arg]
    accepted = 0
    while accepted < length and drafts[accepted] == refs[accepted]:
        accepted += 1
    emitted = drafts[:accepted] + [refs[accepted]]

    if eos_id is not None and eos_id in emitted:
        emitted = emitted[: emitted.index(eos_id) + 1]
    if max_emit is not None:
        emitted = emitted[:max_emit]
    if not emitted:
        raise ValueError("max_emit must allow at least one token")

    drafted_part = len(emitted) if len(emitted) <= accepted else len(emitted) - 1
    state.cache = ext_cache.truncated(start_len + drafted_part)
    new_rows = [hidden[i] for i in range(drafted_part)]
    if drafted_part < len(emitted):
        correction = emitted[-1]
        row, state.cache = model.forward(
            [correction],
            [start_len + drafted_part],
            causal_mask(1, state.cache.length),
            state.cache,
        )
        new_rows.append(row[0])
        passes += 1
    state.tokens.extend(emitted)
    _append_rows(state, new_rows)
    return emitted, passes


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def decode_loop(
    model: TransformerLM,
    prompt,
    strategy: str,
    max_new: int,
    eos_id: int | None = None,
    tree=None,
    profile=None,
    tree_params: dict | None = None,
) -> tuple[list[int], DecodeStats]:
    """Draft/verify/accept until ``max_new`` tokens or the end token.

    ``lmtp+tree`` verifies several candidate ranks per position at once; a
    prebuilt tree, an accuracy profile, or the built-in default profile (in
    that order) decides the tree shape.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy == "ar":
        return ar_decode(model, prompt, max_new, eos_id=eos_id)

    draft_fn = {"mtp": draft_mtp, "fmtp": draft_fmtp, "lmtp": draft_lmtp}.get(strategy)
    stats = DecodeStats(strategy=strategy)
    start = time.perf_counter()
    state = prefill(model, prompt)
    stats.model_passes += 1

    if strategy == "lmtp+tree":
        from . import spectree

        if tree is None:
            tree = spectree.default_tree(model.config, profile=profile,
                                         **(tree_params or {}))
        ranks_needed = tree.max_rank

    while stats.tokens_emitted < max_new:
        remaining = max_new - stats.tokens_emitted
        if strategy == "lmtp+tree":
            draft = draft_lmtp(model, state)
            tokens = spectree.populate_tree(tree, draft.top_tokens(ranks_needed))
            emitted, passes = spectree.verify_tree(
                model, tree, tokens, state, max_emit=remaining, eos_id=eos_id
            )
        else:
            draft = draft_fn(model, state)
            emitted, passes = verify_accept(
                model,
                draft.greedy_tokens(),
                state,
                max_emit=remaining,
                eos_id=eos_id,
            )
        stats.record_round(len(emitted), passes + draft.backbone_passes)
        if eos_id is not None and emitted and emitted[-1] == eos_id:
            break
    stats.wall_seconds = time.perf_counter() - start
    stats.validate()
    return list(state.tokens), stats


def write_stats_csv(rows: list[dict], path) -> None:
    """strategy,prompt_id,tokens,passes,mean_accept,tokens_per_sec,speedup"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["strategy", "prompt_id", "tokens", "passes", "mean_accept",
              "tokens_per_sec", "speedup"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
