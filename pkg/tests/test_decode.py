"""Draft construction, verification, and greedy losslessness."""

import numpy as np
import pytest

from leapmtp.corpus import BOS_ID
from leapmtp.decode import (
    STRATEGIES,
    ar_decode,
    decode_loop,
    draft_fmtp,
    draft_lmtp,
    draft_mtp,
    prefill,
    verify_accept,
    write_stats_csv,
)
from leapmtp.model import ModelConfig, TransformerLM, causal_mask, head_logits
from leapmtp.training import LeapSchedule


def make_model(n_heads=4, stride=2, seed=0, vocab=41, d_model=16, n_layers=1):
    cfg = ModelConfig(vocab_size=vocab, d_model=d_model, n_layers=n_layers,
                      n_attn_heads=2, max_positions=128, n_pred_heads=n_heads,
                      leap_stride=stride)
    return TransformerLM.init(cfg, seed=seed)


def scramble_heads(model, seed=0):
    """Give the extra heads distinct, non-trivial parameters."""
    rng = np.random.default_rng(seed)
    for i in range(2, model.config.n_pred_heads + 1):
        for suffix in ("w", "b", "w_out"):
            name = f"heads.{i}.{suffix}"
            model.params[name] += rng.normal(
                0, 0.05, size=model.params[name].shape
            ).astype(model.params[name].dtype)
    return model


class TestArDecode:
    def test_max_new_zero_returns_prompt(self):
        model = make_model()
        out, stats = ar_decode(model, [1, 2, 3], max_new=0)
        assert out == [1, 2, 3]
        assert stats.tokens_emitted == 0 and stats.verification_passes == 0

    def test_deterministic(self):
        model = make_model(seed=5)
        a, _ = ar_decode(model, [4, 5], max_new=12)
        b, _ = ar_decode(model, [4, 5], max_new=12)
        assert a == b

    def test_stats_are_definitional(self):
        model = make_model(seed=6)
        out, stats = ar_decode(model, [4, 5], max_new=9)
        assert stats.tokens_emitted == 9
        assert stats.verification_passes == 9
        assert stats.mean_accept_length == 1.0
        assert len(out) == 2 + 9

    def test_rejects_non_greedy(self):
        with pytest.raises(NotImplementedError):
            ar_decode(make_model(), [1, 2], 4, mode="sample")

    def test_rejects_empty_prompt(self):
        with pytest.raises(ValueError):
            ar_decode(make_model(), [], 4)


class TestDraftMtp:
    def test_single_head_is_base_distribution(self):
        model = make_model(n_heads=1, stride=1)
        state = prefill(model, [3, 7])
        draft = draft_mtp(model, state)
        assert len(draft) == 1
        assert draft.sources == [(1, 0)]
        want = head_logits(state.tip_hidden.astype(np.float64), model.heads[0])
        np.testing.assert_array_equal(draft.logits[0], want)

    def test_zero_init_heads_draft_identically(self):
        model = make_model()
        state = prefill(model, [3, 7])
        draft = draft_mtp(model, state)
        for row in draft.logits[1:]:
            np.testing.assert_array_equal(row, draft.logits[0])

    def test_all_sources_reference_current_step(self):
        model = make_model()
        draft = draft_mtp(model, prefill(model, [3, 7]))
        assert draft.sources == [(1, 0), (2, 0), (3, 0), (4, 0)]


class TestDraftLmtp:
    def test_stride_one_equals_mtp(self):
        model = make_model(n_heads=4, stride=1)
        state = prefill(model, [3, 7])
        a = draft_lmtp(model, state)
        b = draft_mtp(model, state)
        np.testing.assert_array_equal(a.logits, b.logits)
        assert a.sources == b.sources

    def test_interleaved_source_tags(self):
        model = scramble_heads(make_model())
        draft = draft_lmtp(model, prefill(model, [3, 7, 11]))
        assert len(draft) == 7
        assert draft.sources == [(1, 0), (2, -1), (2, 0), (3, -1), (3, 0),
                                 (4, -1), (4, 0)]

    def test_no_backbone_pass(self):
        model = make_model()
        draft = draft_lmtp(model, prefill(model, [3, 7]))
        assert draft.backbone_passes == 0

    @pytest.mark.parametrize("stride", [1, 2, 3, 4])
    @pytest.mark.parametrize("n_heads", [2, 4, 8])
    def test_source_tag_law(self, stride, n_heads):
        # position i is served by the one cached row a leap head can reach:
        # (1-i) mod k steps back (identical to (i-1) mod k for k <= 2), and
        # the covered offsets are consecutive 1..k(n-1)+1
        model = make_model(n_heads=n_heads, stride=stride)
        schedule = LeapSchedule(n_heads, stride)
        state = prefill(model, list(range(1, stride + 2)))
        draft = draft_lmtp(model, state)
        assert len(draft) == stride * (n_heads - 1) + 1
        for pos, (head, delta) in enumerate(draft.sources, start=1):
            back = -delta
            assert back == (1 - pos) % stride
            if stride <= 2:
                assert back == (pos - 1) % stride
            # the head's leap offset applied `back` steps behind the tip
            # lands exactly on draft position `pos`
            assert schedule.offset(head) - back == pos

    def test_cached_rows_match_fresh_recomputation(self):
        model = scramble_heads(make_model(seed=3), seed=4)
        prompt = [3, 7, 11, 2, 9]
        state = prefill(model, prompt)
        draft = draft_lmtp(model, state)
        # fresh forward over the prompt minus its last token
        hidden, _ = model.forward(prompt[:-1], np.arange(len(prompt) - 1),
                                  causal_mask(len(prompt) - 1))
        for pos, (head_index, delta) in enumerate(draft.sources):
            if delta != -1:
                continue
            head = model.heads[head_index - 1]
            want = head_logits(hidden[-1].astype(np.float64), head)
            np.testing.assert_allclose(draft.logits[pos], want, rtol=1e-5,
                                       atol=1e-6)

    def test_prompt_shorter_than_stride_rejected(self):
        model = make_model(stride=3)
        with pytest.raises(ValueError):
            prefill(model, [5])


class TestDraftFmtp:
    def test_stride_one_equals_mtp(self):
        model = make_model(n_heads=3, stride=1)
        state = prefill(model, [3, 7])
        a = draft_fmtp(model, state)
        b = draft_mtp(model, state)
        np.testing.assert_array_equal(a.logits, b.logits)
        assert a.backbone_passes == 0

    def test_costs_extra_passes_and_looks_forward(self):
        model = scramble_heads(make_model())
        state = prefill(model, [3, 7, 11])
        fwd = draft_fmtp(model, state)
        bwd = draft_lmtp(model, state)
        assert fwd.backbone_passes == 1  # k - 1 extra passes for k = 2
        assert fwd.sources[0] == (1, 0)
        # offset-2: forward uses head 1 one step ahead, backward head 2 one back
        assert fwd.sources[1] == (1, 1)
        assert bwd.sources[1] == (2, -1)
        assert len(fwd) == 8  # offsets 1..k*n

    def test_offsets_consecutive(self):
        model = make_model(n_heads=3, stride=3)
        state = prefill(model, [1, 2, 3, 4])
        draft = draft_fmtp(model, state)
        schedule = LeapSchedule(3, 3)
        assert draft.backbone_passes == 2
        for pos, (head, delta) in enumerate(draft.sources, start=1):
            assert delta == (pos - 1) % 3
            assert schedule.offset(head) + delta == pos

    def test_speculative_cache_rows_are_dropped(self):
        model = make_model()
        state = prefill(model, [3, 7])
        before = state.cache.length
        draft_fmtp(model, state)
        assert state.cache.length == before


class TestVerifyAccept:
    def test_all_match_emits_draft_plus_bonus(self):
        model = make_model(seed=9)
        prompt = [3, 7]
        ar, _ = ar_decode(model, prompt, max_new=5)
        state = prefill(model, prompt)
        emitted, passes = verify_accept(model, ar[2:6], state)
        assert emitted == ar[2:7]  # 4 drafts + 1 bonus
        assert passes == 2
        assert state.tokens == ar[:7]
        assert state.cache.length == len(state.tokens)

    def test_first_mismatch_emits_one_corrected_token(self):
        model = make_model(seed=9)
        prompt = [3, 7]
        ar, _ = ar_decode(model, prompt, max_new=1)
        wrong = (ar[2] + 1) % model.config.vocab_size
        state = prefill(model, prompt)
        emitted, _ = verify_accept(model, [wrong, 5, 5], state)
        assert emitted == [ar[2]]
        assert state.tokens == ar[:3]

    def test_partial_prefix(self):
        model = make_model(seed=10)
        prompt = [4, 1]
        ar, _ = ar_decode(model, prompt, max_new=6)
        drafts = ar[2:5] + [(ar[5] + 3) % model.config.vocab_size]
        state = prefill(model, prompt)
        emitted, _ = verify_accept(model, drafts, state)
        assert emitted == ar[2:6]  # 3 accepted + correction == 4th AR token

    def test_max_emit_caps_emission(self):
        model = make_model(seed=9)
        prompt = [3, 7]
        ar, _ = ar_decode(model, prompt, max_new=5)
        state = prefill(model, prompt)
        emitted, _ = verify_accept(model, ar[2:6], state, max_emit=2)
        assert emitted == ar[2:4]
        assert state.cache.length == len(state.tokens) == 4

    def test_state_ring_tracks_last_positions(self):
        model = make_model(seed=11)
        prompt = [6, 2, 8]
        ar, _ = ar_decode(model, prompt, max_new=4)
        state = prefill(model, prompt)
        verify_accept(model, ar[3:6], state)
        # replay the full accepted sequence; ring rows must match the replay
        hidden, _ = model.forward(state.tokens, np.arange(len(state.tokens)),
                                  causal_mask(len(state.tokens)))
        np.testing.assert_allclose(state.tip_hidden, hidden[-1], rtol=1e-5,
                                   atol=1e-6)
        np.testing.assert_allclose(state.hidden_at_back(1), hidden[-2],
                                   rtol=1e-5, atol=1e-6)


class TestDecodeLoop:
    @pytest.mark.parametrize("strategy", ["mtp", "fmtp", "lmtp", "lmtp+tree"])
    def test_greedy_losslessness_untrained(self, strategy):
        model = scramble_heads(make_model(seed=21), seed=2)
        for p, prompt in enumerate([[3, 7], [1, 2, 3], [9, 9, 4, 30]]):
            want, _ = ar_decode(model, prompt, max_new=20)
            got, stats = decode_loop(model, prompt, strategy, max_new=20)
            assert got == want, f"{strategy} diverged on prompt {p}"
            stats.validate()
            assert stats.tokens_emitted == 20

    def test_strategy_ar_delegates(self):
        model = make_model(seed=13)
        a, sa = decode_loop(model, [5, 6], "ar", max_new=7)
        b, sb = ar_decode(model, [5, 6], max_new=7)
        assert a == b and sa.strategy == sb.strategy == "ar"

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            decode_loop(make_model(), [1, 2], "beam", 4)

    def test_accounting_invariants(self):
        model = scramble_heads(make_model(seed=14))
        _, stats = decode_loop(model, [2, 3], "lmtp", max_new=17)
        assert stats.tokens_emitted == 17
        assert sum(stats.accept_histogram.values()) == stats.verification_passes
        assert sum(k * v for k, v in stats.accept_histogram.items()) == 17
        assert stats.mean_accept_length >= 1.0

    def test_eos_truncates_inside_accepted_prefix(self):
        model = make_model(seed=15)
        ar, _ = ar_decode(model, [8, 2], max_new=25)
        eos = ar[6]  # force a stop at a token the model will emit
        want_ar, _ = ar_decode(model, [8, 2], max_new=25, eos_id=eos)
        got, _ = decode_loop(model, [8, 2], "lmtp", max_new=25, eos_id=eos)
        assert got == want_ar
        assert got[-1] == eos

    def test_losslessness_trained_model(self, trained_model, prompt_tokens):
        for p in range(6):
            prompt = prompt_tokens(p)
            want, _ = ar_decode(trained_model, prompt, max_new=24)
            for strategy in ("mtp", "fmtp", "lmtp", "lmtp+tree"):
                got, stats = decode_loop(trained_model, prompt, strategy,
                                         max_new=24)
                assert got == want, (strategy, p)
                stats.validate()

    def test_trained_lmtp_accepts_more_than_one(self, trained_model,
                                                prompt_tokens):
        total_accept = 0.0
        rounds = 0
        for p in range(8):
            _, stats = decode_loop(trained_model, prompt_tokens(p), "lmtp",
                                   max_new=32)
            total_accept += stats.tokens_emitted
            rounds += stats.verification_passes
        assert total_accept / rounds > 1.0

    def test_cache_hygiene_after_decode(self, trained_model, prompt_tokens):
        from leapmtp.decode import prefill as _prefill

        prompt = prompt_tokens(3)
        out, _ = decode_loop(trained_model, prompt, "lmtp", max_new=16)
        state = _prefill(trained_model, prompt)
        # replay the emitted sequence with a fresh full pass; base logits at
        # every position must agree with an incremental replay
        hidden_full, _ = trained_model.forward(
            out, np.arange(len(out)), causal_mask(len(out)))
        base = trained_model.heads[0]
        full_logits = head_logits(hidden_full, base)
        state2 = _prefill(trained_model, out)
        np.testing.assert_allclose(
            head_logits(state2.tip_hidden, base), full_logits[-1],
            rtol=1e-5, atol=1e-5)


class TestStatsCsv:
    def test_columns(self, tmp_path):
        rows = [dict(strategy="ar", prompt_id=0, tokens=10, passes=10,
                     mean_accept=1.0, tokens_per_sec=123.4, speedup=1.0)]
        path = tmp_path / "stats.csv"
        write_stats_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "strategy,prompt_id,tokens,passes,mean_accept,tokens_per_sec,speedup"
        assert lines[1].startswith("ar,0,10,10,1.0,")
