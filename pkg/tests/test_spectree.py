"""Tree construction, masking, population, verification, profiling."""

import numpy as np
import pytest

from leapmtp.corpus import Corpus
from leapmtp.decode import ar_decode, decode_loop, draft_lmtp, prefill, verify_accept
from leapmtp.model import ModelConfig, TransformerLM, causal_mask, head_logits
from leapmtp.spectree import (
    DROPPED,
    HeadAccuracyProfile,
    TokenTree,
    TreeNode,
    build_tree,
    default_profile,
    default_tree,
    estimate_profile,
    export_tree,
    load_profile,
    populate_tree,
    save_profile,
    tree_mask,
    verify_tree,
)
from leapmtp.training import LeapSchedule, TrainingConfig, train


def make_model(seed=0, n_heads=4, stride=2, vocab=41):
    cfg = ModelConfig(vocab_size=vocab, d_model=16, n_layers=1, n_attn_heads=2,
                      max_positions=128, n_pred_heads=n_heads, leap_stride=stride)
    return TransformerLM.init(cfg, seed=seed)


def chain_tree(depth):
    nodes = [TreeNode(i, i - 1 if i else -1, i + 1, 1) for i in range(depth)]
    return TokenTree(nodes, [1.0] * depth)


class TestProfile:
    def test_validation(self):
        with pytest.raises(ValueError):
            HeadAccuracyProfile(np.array([[0.5, 0.6]]))  # increasing in rank
        with pytest.raises(ValueError):
            HeadAccuracyProfile(np.array([[1.2, 0.1]]))
        with pytest.raises(ValueError):
            HeadAccuracyProfile(np.empty((0, 2)))
        p = HeadAccuracyProfile(np.array([[0.9, 0.4], [0.6, 0.2]]))
        assert p.depth == 2 and p.ranks == 2
        np.testing.assert_array_equal(p.top1, [0.9, 0.6])

    def test_csv_roundtrip(self, tmp_path):
        p = HeadAccuracyProfile(np.array([[0.9, 0.4], [0.6, 0.2]]))
        path = tmp_path / "profile.csv"
        save_profile(p, path)
        assert path.read_text().splitlines()[0] == "position,rank,accuracy"
        q = load_profile(path)
        np.testing.assert_allclose(q.acc, p.acc, atol=1e-9)


class TestBuildTree:
    def test_budget_one_is_rank_one_root(self):
        tree = build_tree(HeadAccuracyProfile(np.array([[0.9, 0.5]])), 1, 2, 1)
        assert len(tree) == 1
        node = tree.nodes[0]
        assert (node.parent, node.layer, node.rank) == (-1, 1, 1)

    def test_certainty_gives_single_chain(self):
        profile = HeadAccuracyProfile(np.ones((6, 1)))
        tree = build_tree(profile, budget=4, max_children=1, max_depth=4)
        assert len(tree) == 4
        assert [n.layer for n in tree.nodes] == [1, 2, 3, 4]
        assert all(n.rank == 1 for n in tree.nodes)
        assert tree.expectations == [1.0] * 4

    def test_reference_three_node_expansion(self):
        # 0.72 (child of L1r1) beats 0.5 (L1r2) beats 0.27 (L2r2 under L1r1)
        profile = HeadAccuracyProfile(np.array([[0.9, 0.5], [0.8, 0.3]]))
        tree = build_tree(profile, budget=3, max_children=2, max_depth=2)
        shapes = {(n.parent, n.layer, n.rank) for n in tree.nodes}
        assert shapes == {(-1, 1, 1), (0, 2, 1), (-1, 1, 2)}
        assert sorted(tree.expectations, reverse=True) == pytest.approx(
            [0.9, 0.72, 0.5])

    def test_greedy_matches_brute_force_on_small_instances(self):
        rng = np.random.default_rng(0)
        for trial in range(40):
            acc = np.sort(rng.uniform(0.05, 0.95, size=(2, 2)), axis=1)[:, ::-1]
            profile = HeadAccuracyProfile(acc)
            for budget in (1, 2, 3, 4):
                tree = build_tree(profile, budget, max_children=2,
                                  max_depth=min(2, budget))
                got = {(n.parent, n.layer, n.rank) for n in tree.nodes}
                want = brute_force_best_first(acc, budget)
                assert got == want, (trial, budget, acc)

    def test_deterministic_tie_break(self):
        profile = HeadAccuracyProfile(np.full((2, 2), 0.5))
        a = build_tree(profile, 4, 2, 2)
        b = build_tree(profile, 4, 2, 2)
        assert [(n.parent, n.layer, n.rank) for n in a.nodes] == \
               [(n.parent, n.layer, n.rank) for n in b.nodes]
        # ties prefer the smaller layer: second node is the L1 sibling
        assert (a.nodes[1].layer, a.nodes[1].rank) == (1, 2)

    def test_bad_arguments(self):
        profile = HeadAccuracyProfile(np.array([[0.9]]))
        with pytest.raises(ValueError):
            build_tree(profile, budget=0, max_children=1, max_depth=1)
        with pytest.raises(ValueError):
            build_tree(profile, budget=2, max_children=1, max_depth=3)


def brute_force_best_first(acc, budget):
    """Repeatedly add the legal node with the best full-path expectation."""
    nodes = {}  # (parent, layer, rank) -> expectation
    for _ in range(budget):
        legal = {}
        parents = {-1: 1.0}
        for (p, l, r), e in nodes.items():
            parents[(p, l, r)] = e
        # legal additions: any (parent, layer, rank) whose parent exists
        for parent_key, pe in parents.items():
            layer = 1 if parent_key == -1 else parent_key[1] + 1
            if layer > acc.shape[0]:
                continue
            for rank in range(1, acc.shape[1] + 1):
                key = (parent_key, layer, rank)
                if key not in nodes:
                    legal[key] = pe * acc[layer - 1, rank - 1]
        if not legal:
            break
        best = min(legal, key=lambda k: (-legal[k], k[1], k[2]))
        nodes[best] = legal[best]
    # normalize parent refs to id-free shape tuples for comparison
    ids = {}
    out = set()
    for i, key in enumerate(nodes):
        ids[key] = i
    for (parent_key, layer, rank) in nodes:
        parent = -1 if parent_key == -1 else ids[parent_key]
        out.add((parent, layer, rank))
    return out


class TestTreeMask:
    def test_chain_equals_causal(self):
        tree = chain_tree(5)
        mask, positions = tree_mask(tree, prefix_len=3)
        np.testing.assert_array_equal(mask, causal_mask(5, 3))
        np.testing.assert_array_equal(positions, [3, 4, 5, 6, 7])

    def test_siblings_do_not_see_each_other(self):
        nodes = [TreeNode(0, -1, 1, 1), TreeNode(1, -1, 1, 2)]
        mask, positions = tree_mask(TokenTree(nodes, [0.9, 0.5]), prefix_len=2)
        assert not mask[0, 3] and not mask[1, 2]
        assert mask[0, 2] and mask[1, 3]
        np.testing.assert_array_equal(positions, [2, 2])

    def test_paths_and_ancestors(self):
        nodes = [TreeNode(0, -1, 1, 1), TreeNode(1, 0, 2, 1), TreeNode(2, 0, 2, 2)]
        tree = TokenTree(nodes, [0.9, 0.7, 0.3])
        assert tree.ancestors(1) == [0]
        assert sorted(map(tuple, tree.paths())) == [(0, 1), (0, 2)]


class TestPopulate:
    def test_rank_one_chain_is_greedy_draft(self):
        model = make_model(seed=2)
        state = prefill(model, [3, 7, 9])
        draft = draft_lmtp(model, state)
        tree = chain_tree(7)
        tokens = populate_tree(tree, draft.top_tokens(1))
        np.testing.assert_array_equal(tokens, draft.greedy_tokens())

    def test_top_two_at_layer_one(self):
        model = make_model(seed=2)
        state = prefill(model, [3, 7, 9])
        draft = draft_lmtp(model, state)
        nodes = [TreeNode(0, -1, 1, 1), TreeNode(1, -1, 1, 2)]
        tokens = populate_tree(TokenTree(nodes, [0.9, 0.5]), draft.top_tokens(2))
        order = np.argsort(-draft.logits[0], kind="stable")
        np.testing.assert_array_equal(tokens, order[:2])

    def test_token_multiset_matches_independent_top_r(self):
        model = make_model(seed=4)
        state = prefill(model, [5, 1, 2])
        draft = draft_lmtp(model, state)
        tree = default_tree(model.config, budget=12)
        tokens = populate_tree(tree, draft.top_tokens(tree.max_rank))
        for node in tree.nodes:
            top = np.argsort(-draft.logits[node.layer - 1], kind="stable")
            assert tokens[node.node_id] == top[node.rank - 1]

    def test_rank_overflow_rejected(self):
        tree = TokenTree([TreeNode(0, -1, 1, 3)], [0.5])
        with pytest.raises(ValueError):
            populate_tree(tree, np.zeros((3, 2), dtype=int))

    def test_depth_overflow_rejected(self):
        with pytest.raises(ValueError):
            populate_tree(chain_tree(4), np.zeros((3, 1), dtype=int))

    def test_duplicate_sibling_dropped_with_subtree(self):
        nodes = [TreeNode(0, -1, 1, 1), TreeNode(1, -1, 1, 2), TreeNode(2, 1, 2, 1)]
        tree = TokenTree(nodes, [0.9, 0.5, 0.4])
        top = np.array([[7, 7], [3, 1]])  # rank-2 duplicates rank-1 at layer 1
        tokens = populate_tree(tree, top)
        assert tokens[0] == 7
        assert tokens[1] == DROPPED and tokens[2] == DROPPED


class TestVerifyTree:
    def test_chain_tree_equals_linear_verify(self):
        model = make_model(seed=7)
        prompt = [3, 7]
        ar, _ = ar_decode(model, prompt, max_new=6)
        drafts = ar[2:5] + [(ar[5] + 1) % model.config.vocab_size]

        linear_state = prefill(model, prompt)
        linear_emitted, _ = verify_accept(model, list(drafts), linear_state)

        tree_state = prefill(model, prompt)
        tree = chain_tree(4)
        emitted, passes = verify_tree(model, tree, np.array(drafts), tree_state)
        assert emitted == linear_emitted
        assert passes == 2
        assert tree_state.tokens == linear_state.tokens
        assert tree_state.cache.length == len(tree_state.tokens)

    def test_all_wrong_emits_single_correction(self):
        model = make_model(seed=8)
        prompt = [4, 9]
        ar, _ = ar_decode(model, prompt, max_new=1)
        tree = chain_tree(3)
        state = prefill(model, prompt)
        wrong = [(ar[2] + 1) % 41, 0, 0]
        emitted, _ = verify_tree(model, tree, np.array(wrong), state)
        assert emitted == [ar[2]]

    def test_ancestor_only_soundness(self):
        model = make_model(seed=9)
        prompt = [1, 2, 3]
        state = prefill(model, prompt)
        profile = HeadAccuracyProfile(
            np.tile(np.array([[0.8, 0.4, 0.2]]), (5, 1)))
        tree = build_tree(profile, budget=12, max_children=3, max_depth=4)
        mask, positions = tree_mask(tree, state.cache.length)
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, 41, size=len(tree))
        victim = next(n.node_id for n in tree.nodes
                      if tree.children[n.node_id] and n.layer == 1)
        changed = tokens.copy()
        changed[victim] = (changed[victim] + 1) % 41

        ha, _ = model.forward(tokens, positions, mask, state.cache)
        hb, _ = model.forward(changed, positions, mask, state.cache)
        for node in tree.nodes:
            i = node.node_id
            if i == victim or victim in tree.ancestors(i):
                continue
            assert ha[i].tobytes() == hb[i].tobytes(), f"node {i} leaked"
        assert not np.array_equal(ha[victim], hb[victim])

    def test_batched_equals_per_path_random_trees(self):
        model = make_model(seed=10)
        rng = np.random.default_rng(1)
        prompt = [5, 6, 7]
        state = prefill(model, prompt)
        for trial in range(5):
            acc = np.sort(rng.uniform(0.1, 0.9, size=(5, 3)), axis=1)[:, ::-1]
            tree = build_tree(HeadAccuracyProfile(acc), budget=15,
                              max_children=3, max_depth=5)
            mask, positions = tree_mask(tree, len(prompt))
            tokens = rng.integers(0, 41, size=len(tree))
            batched, _ = model.forward(tokens, positions, mask, state.cache)
            for path in tree.paths():
                seq = [int(tokens[j]) for j in path]
                pos = [int(positions[j]) for j in path]
                hidden, _ = model.forward(seq, pos,
                                          causal_mask(len(seq), len(prompt)),
                                          state.cache)
                for step, j in enumerate(path):
                    np.testing.assert_allclose(batched[j], hidden[step],
                                               rtol=1e-5, atol=1e-6)

    def test_tree_decode_lossless(self, trained_model, prompt_tokens):
        profile = default_profile(trained_model.config)
        tree = default_tree(trained_model.config, profile, budget=15)
        for p in range(4):
            prompt = prompt_tokens(p)
            want, _ = ar_decode(trained_model, prompt, max_new=20)
            got, stats = decode_loop(trained_model, prompt, "lmtp+tree",
                                     max_new=20, tree=tree)
            assert got == want
            stats.validate()


class TestEstimateProfile:
    def test_refuses_small_corpus(self):
        model = make_model(vocab=258)
        corpus = Corpus(documents=[np.arange(30, dtype=np.int32)])
        with pytest.raises(ValueError):
            estimate_profile(model, corpus, min_positions=1000)

    def test_zero_init_heads_match_base_offset_accuracy(self):
        model = make_model(seed=12, vocab=258)
        rng = np.random.default_rng(3)
        docs = [rng.integers(0, 256, size=80).astype(np.int32) for _ in range(20)]
        corpus = Corpus(documents=docs)
        profile = estimate_profile(model, corpus, min_positions=500)
        # with untouched heads, draft position i behaves exactly like the
        # base head scored at the serving head's own offset
        base = model.heads[0]
        schedule = LeapSchedule(4, 2)
        for i in (1, 2, 3, 7):
            back = (1 - i) % 2
            offset = schedule.offset((i + back - 1) // 2 + 1)
            hits = total = 0
            for doc in docs:
                hidden, _ = model.forward(doc, np.arange(len(doc)),
                                          causal_mask(len(doc)))
                logits = head_logits(hidden[:-offset].astype(np.float64), base)
                pred = np.argmax(logits, axis=1)
                hits += int((pred == doc[offset:]).sum())
                total += len(doc) - offset
            assert profile.acc[i - 1, 0] == pytest.approx(hits / total, abs=1e-12)

    def test_memorized_corpus_is_near_perfect(self):
        cfg = ModelConfig(vocab_size=258, d_model=16, n_layers=1, n_attn_heads=2,
                          max_positions=64, n_pred_heads=4, leap_stride=2)
        model = TransformerLM.init(cfg, seed=13)
        doc = np.full(40, 97, dtype=np.int32)  # a constant stream memorizes fast
        corpus = Corpus(documents=[doc.copy() for _ in range(40)])
        train(model, corpus, TrainingConfig(stage="full", learning_rate=3e-3,
                                            epochs=8, window_len=32, beta=1.0,
                                            seed=0))
        profile = estimate_profile(model, corpus, min_positions=500)
        assert np.all(profile.top1 > 0.99)

    def test_positions_sharing_a_head_share_accuracy(self, trained_model,
                                                     corpus_small):
        val = Corpus(documents=[d.copy() for d in corpus_small.documents[:40]])
        profile = estimate_profile(trained_model, val, min_positions=500)
        # positions 2 and 3 are both head 2 at gap 3: identical pair sets
        assert profile.acc[1, 0] == profile.acc[2, 0]
        assert profile.acc[3, 0] == profile.acc[4, 0]


class TestExport:
    def test_node_lines_and_mask_dump(self, tmp_path):
        tree = chain_tree(3)
        path = tmp_path / "tree.txt"
        export_tree(tree, path)
        assert path.read_text().splitlines() == ["0 -1 1 1", "1 0 2 1", "2 1 3 1"]
        export_tree(tree, path, include_mask=True, prefix_len=1)
        lines = path.read_text().splitlines()
        assert lines[3] == "" and lines[4] == "1100"
