"""Candidate token trees for batched speculative verification.

A token tree holds several candidate continuations at once: layer i carries
candidates for draft position i, and every root-to-leaf path is one possible
continuation. One batched forward pass with an ancestor-only attention mask
scores all of them; the accepted path is whichever one the base head keeps
agreeing with. Tree shape is decided ahead of decoding by greedily growing
the node whose root path has the highest cumulative expected accuracy, with
per-position expectations estimated from validation data.

Position indices repeat across a layer (prompt length + layer - 1), which is
why the backbone takes explicit positions. After acceptance the cache rows
from the tree layout are discarded and the accepted tokens plus correction
are re-run in a small contiguous pass; at desk scale the extra pass is
cheaper than gathering KV rows out of tree order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .decode import DecodeState, _append_rows, _argmax64
from .model import ModelConfig, TransformerLM, causal_mask, head_logits
from .training import LeapSchedule

__all__ = [
    "HeadAccuracyProfile",
    "TreeNode",
    "TokenTree",
    "build_tree",
    "tree_mask",
    "populate_tree",
    "verify_tree",
    "estimate_profile",
    "default_profile",
    "default_tree",
    "save_profile",
    "load_profile",
    "export_tree",
]

DROPPED = -1


@dataclass(frozen=True)
class HeadAccuracyProfile:
    """acc[i, r]: probability that the rank-(r+1) candidate at draft
    position i+1 is the true token. Rows are draft positions after the leap
    interleave; entries must be in [0, 1] and non-increasing in rank."""

    acc: np.ndarray

    def __post_init__(self):
        acc = np.asarray(self.acc, dtype=np.float64)
        if acc.ndim != 2 or acc.size == 0:
            raise ValueError("profile must be a non-empty (positions x ranks) matrix")
        if acc.min() < 0.0 or acc.max() > 1.0:
            raise ValueError("profile entries must lie in [0, 1]")
        if np.any(np.diff(acc, axis=1) > 1e-12):
            raise ValueError("profile must be non-increasing in rank")
        object.__setattr__(self, "acc", acc)

    @property
    def depth(self) -> int:
        return self.acc.shape[0]

    @property
    def ranks(self) -> int:
        return self.acc.shape[1]

    @property
    def top1(self) -> np.ndarray:
        return self.acc[:, 0]


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    parent: int  # -1 for layer-1 nodes
    layer: int   # 1-based draft position
    rank: int    # 1-based candidate rank at that position


class TokenTree:
    """Layered candidate tree; node ids follow creation order, so a parent's
    id is always smaller than its children's."""

    def __init__(self, nodes: list[TreeNode], expectations: list[float]):
        if not nodes:
            raise ValueError("tree must have at least one node")
        self.nodes = list(nodes)
        self.expectations = list(expectations)
        self.children: dict[int, list[int]] = {-1: []}
        for node in self.nodes:
            self.children.setdefault(node.node_id, [])
            self.children.setdefault(node.parent, []).append(node.node_id)
        for kids in self.children.values():
            kids.sort(key=lambda i: self.nodes[i].rank)
        roots = [n for n in self.nodes if n.parent == -1]
        if any(n.layer != 1 for n in roots):
            raise ValueError("all parentless nodes must sit at layer 1")
        for node in self.nodes:
            if node.parent != -1 and self.nodes[node.parent].layer != node.layer - 1:
                raise ValueError("parent must sit exactly one layer above its child")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        return max(n.layer for n in self.nodes)

    @property
    def max_rank(self) -> int:
        return max(n.rank for n in self.nodes)

    def ancestors(self, node_id: int) -> list[int]:
        out = []
        j = self.nodes[node_id].parent
        while j != -1:
            out.append(j)
            j = self.nodes[j].parent
        return out

    def paths(self) -> list[list[int]]:
        """Root-to-leaf node-id lists, one per leaf."""
        leaves = [n.node_id for n in self.nodes if not self.children[n.node_id]]
        out = []
        for leaf in leaves:
            path = [leaf] + self.ancestors(leaf)
            path.reverse()
            out.append(path)
        return out


def build_tree(
    profile: HeadAccuracyProfile,
    budget: int,
    max_children: int,
    max_depth: int,
) -> TokenTree:
    """Greedy top-down growth to ``budget`` nodes.

    The candidate moves from an existing node are its next sibling rank and
    its first child in the next layer; each step adds the candidate whose
    full root-path expectation (product of profile entries along the path)
    is highest. Ties break lexicographically on (layer, rank, parent id).
    """
    if not budget >= max_depth >= 1:
        raise ValueError("need budget >= max_depth >= 1")
    if max_children < 1:
        raise ValueError("max_children must be >= 1")
    depth_cap = min(max_depth, profile.depth)
    rank_cap = min(max_children, profile.ranks)

    nodes: list[TreeNode] = []
    path_exp: list[float] = []
    # candidate key: (parent id, layer, rank) -> path expectation
    candidates: dict[tuple[int, int, int], float] = {
        (-1, 1, 1): float(profile.acc[0, 0])
    }

    def parent_exp(parent: int) -> float:
        return 1.0 if parent == -1 else path_exp[parent]

    while len(nodes) < budget and candidates:
        key = min(candidates, key=lambda c: (-candidates[c], c[1], c[2], c[0]))
        exp = candidates.pop(key)
        parent, layer, rank = key
        node = TreeNode(node_id=len(nodes), parent=parent, layer=layer, rank=rank)
        nodes.append(node)
        path_exp.append(exp)
        if layer < depth_cap:
            candidates[(node.node_id, layer + 1, 1)] = exp * float(
                profile.acc[layer, 0]
            )
        if rank < rank_cap:
            candidates[(parent, layer, rank + 1)] = parent_exp(parent) * float(
                profile.acc[layer - 1, rank]
            )
    return TokenTree(nodes, path_exp)


def tree_mask(tree: TokenTree, prefix_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Ancestor-only attention mask and per-node positions.

    Row q allows the committed prefix, q's ancestors, and q itself; node
    positions are prefix_len + layer - 1 so siblings share a position.
    """
    n = len(tree)
    mask = np.zeros((n, prefix_len + n), dtype=bool)
    mask[:, :prefix_len] = True
    positions = np.empty(n, dtype=np.int64)
    for node in tree.nodes:
        q = node.node_id
        mask[q, prefix_len + q] = True
        for a in tree.ancestors(q):
            mask[q, prefix_len + a] = True
        positions[q] = prefix_len + node.layer - 1
    return mask, positions


def populate_tree(tree: TokenTree, top_tokens: np.ndarray) -> np.ndarray:
    """Assign the rank-r candidate of draft position i to each (layer i,
    rank r) node. ``top_tokens`` is (positions, ranks), best rank first.

    Siblings that duplicate a better-ranked sibling's token are dropped
    (marked with -1) along with their subtrees; with distinct top-R
    candidates per position this never fires.
    """
    top_tokens = np.asarray(top_tokens)
    if top_tokens.ndim != 2:
        raise ValueError("top_tokens must be (positions, ranks)")
    if top_tokens.shape[0] < tree.depth:
        raise ValueError(
            f"draft covers {top_tokens.shape[0]} positions, tree needs {tree.depth}"
        )
    if top_tokens.shape[1] < tree.max_rank:
        raise ValueError(
            f"draft provides {top_tokens.shape[1]} ranks, tree needs {tree.max_rank}"
        )
    tokens = np.empty(len(tree), dtype=np.int64)
    for node in tree.nodes:
        tokens[node.node_id] = top_tokens[node.layer - 1, node.rank - 1]
    # dedup among siblings, best rank wins, subtree goes with the node
    for kids in tree.children.values():
        seen: set[int] = set()
        for kid in kids:  # already rank-sorted
            if tokens[kid] == DROPPED:
                continue
            if int(tokens[kid]) in seen:
                stack = [kid]
                while stack:
                    j = stack.pop()
                    tokens[j] = DROPPED
                    stack.extend(tree.children[j])
            else:
                seen.add(int(tokens[kid]))
    return tokens


def verify_tree(
    model: TransformerLM,
    tree: TokenTree,
    tokens: np.ndarray,
    state: DecodeState,
    max_emit: int | None = None,
    eos_id: int | None = None,
) -> tuple[list[int], int]:
    """Score every node in one masked pass, walk the accepted path, commit.

    Acceptance walks from the root: at each layer take the child whose token
    equals the base head's argmax given the accepted ancestors; stop at the
    first layer without a match and emit the accepted tokens plus that
    argmax as the correction. The tree-layout cache is discarded; accepted
    tokens and the correction are recomputed contiguously in one small pass
    (which also refreshes the hidden ring). Returns (emitted, passes).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (len(tree),):
        raise ValueError("need one token per tree node")
    base = model.heads[0]
    prefix = state.cache.length
    mask, positions = tree_mask(tree, prefix)
    run_tokens = np.where(tokens == DROPPED, 0, tokens)
    hidden, _tree_cache = model.forward(run_tokens, positions, mask, state.cache)
    node_argmax = np.argmax(head_logits(hidden.astype(np.float64), base), axis=1)

    accepted: list[int] = []
    ref = _argmax64(state.tip_hidden, base)
    frontier = tree.children[-1]
    while True:
        match = next(
            (k for k in frontier if tokens[k] != DROPPED and int(tokens[k]) == ref),
            None,
        )
        if match is None:
            break
        accepted.append(match)
        ref = int(node_argmax[match])
        frontier = tree.children[match]
    emitted = [int(tokens[k]) for k in accepted] + [ref]

    if eos_id is not None and eos_id in emitted:
        emitted = emitted[: emitted.index(eos_id) + 1]
    if max_emit is not None:
        emitted = emitted[:max_emit]
    if not emitted:
        raise ValueError("max_emit must allow at least one token")

    compact_pos = np.arange(prefix, prefix + len(emitted))
    rows, state.cache = model.forward(
        emitted, compact_pos, causal_mask(len(emitted), prefix), state.cache
    )
    state.tokens.extend(emitted)
    _append_rows(state, [rows[i] for i in range(len(emitted))])
    return emitted, 2


# ---------------------------------------------------------------------------
# accuracy profiles
# ---------------------------------------------------------------------------


def estimate_profile(
    model: TransformerLM,
    corpus: Corpus,
    schedule: LeapSchedule | None = None,
    top_ranks: int = 3,
    min_positions: int = 1000,
) -> HeadAccuracyProfile:
    """Empirical per-rank hit rates under backward-looking conditioning.

    Draft position i is served by the head with offset i + ((1-i) mod k)
    applied (1-i) mod k steps back, so over a teacher-forced document the
    scored (row, target) pairs for position i are exactly the head's pairs
    at its own offset; accuracies are estimated per head and mapped to the
    positions it serves. Rank hit rates are clamped non-increasing in rank
    (sampling noise at deep ranks can produce tiny inversions).

    Refuses when fewer than ``min_positions`` pairs support some position.
    """
    schedule = schedule or LeapSchedule.for_model(model)
    k, n = schedule.stride, schedule.n_heads
    heads = model.heads
    hits = np.zeros((n, top_ranks), dtype=np.int64)
    totals = np.zeros(n, dtype=np.int64)
    max_len = model.config.max_positions
    for doc in corpus.documents:
        doc = doc[:max_len]
        if len(doc) < 2:
            continue
        hidden, _ = model.forward(
            doc, np.arange(len(doc)), causal_mask(len(doc))
        )
        for h, head in enumerate(heads):
            offset = schedule.offset(head.head_index)
            if len(doc) <= offset:
                continue
            logits = head_logits(hidden[: len(doc) - offset].astype(np.float64), head)
            top = np.argsort(-logits, axis=1, kind="stable")[:, :top_ranks]
            targets = np.asarray(doc[offset:], dtype=np.int64)
            hits[h] += (top == targets[:, None]).sum(axis=0)
            totals[h] += len(targets)
    if totals.min() < min_positions:
        raise ValueError(
            f"validation corpus too small: head with only {int(totals.min())} scored "
            f"positions, need >= {min_positions}"
        )
    head_acc = hits / totals[:, None]
    head_acc = np.minimum.accumulate(head_acc, axis=1)
    depth = k * (n - 1) + 1
    acc = np.empty((depth, top_ranks), dtype=np.float64)
    for i in range(1, depth + 1):
        back = (1 - i) % k
        head_index = (i + back - 1) // k + 1
        acc[i - 1] = head_acc[head_index - 1]
    return HeadAccuracyProfile(acc=acc)


def default_profile(config: ModelConfig, top_ranks: int = 3) -> HeadAccuracyProfile:
    """Neutral decaying profile for running trees without measured data."""
    depth = config.leap_stride * (config.n_pred_heads - 1) + 1
    i = np.arange(depth, dtype=np.float64)[:, None]
    r = np.arange(top_ranks, dtype=np.float64)[None, :]
    acc = (0.7 * np.exp(-0.25 * i) + 0.05) * 0.45**r
    return HeadAccuracyProfile(acc=acc)


def default_tree(
    config: ModelConfig,
    profile: HeadAccuracyProfile | None = None,
    budget: int = 25,
    max_children: int = 3,
    max_depth: int | None = None,
) -> TokenTree:
    """Static tree from a profile: depth capped at min(k(n-1)+1, 7)."""
    if profile is None:
        profile = default_profile(config)
    if max_depth is None:
        max_depth = min(config.leap_stride * (config.n_pred_heads - 1) + 1, 7)
    return build_tree(profile, budget=budget, max_children=max_children,
                      max_depth=max_depth)


def save_profile(profile: HeadAccuracyProfile, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "rank", "accuracy"])
        for i in range(profile.depth):
            for r in range(profile.ranks):
                writer.writerow([i + 1, r + 1, f"{profile.acc[i, r]:.10g}"])


def load_profile(path) -> HeadAccuracyProfile:
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows:
        raise ValueError(f"empty profile file {path}")
    depth = max(int(r["position"]) for r in rows)
    ranks = max(int(r["rank"]) for r in rows)
    acc = np.zeros((depth, ranks))
    for r in rows:
        acc[int(r["position"]) - 1, int(r["rank"]) - 1] = float(r["accuracy"])
    return HeadAccuracyProfile(acc=acc)


def export_tree(tree: TokenTree, path, include_mask: bool = False,
                prefix_len: int = 0) -> None:
    """One node per line: ``id parent layer rank``; with ``include_mask`` a
    0/1 dump of the ancestor mask follows after a blank line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{n.node_id} {n.parent} {n.layer} {n.rank}" for n in tree.nodes]
    if include_mask:
        mask, _ = tree_mask(tree, prefix_len)
        lines.append("")
        lines.extend("".join("1" if v else "0" for v in row) for row in mask)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
