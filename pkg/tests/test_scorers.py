import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbsdecode import (
    ContractError,
    DataError,
    NGramModel,
    UniformScorer,
    Vocabulary,
    load_corpus,
    ngram_logprob,
    ngram_train,
    score_step,
    sequence_logprob,
)
from conftest import make_vocab, random_ngram
from oracles import ngram_sequence_logprob


def scorer_contract_checks(scorer, conditioning=None, tol=1e-6, steps=5, rng=None):
    """Shared conformance suite: normalization, purity, clone behavior."""
    rng = rng or np.random.default_rng(0)
    state = scorer.initial_state(conditioning)
    for _ in range(steps):
        probs = np.exp(state.log_probs)
        assert abs(probs.sum() - 1.0) < tol
        w = int(rng.integers(0, scorer.vocab_size))
        again_state, again_dist = scorer.step(state, w)
        clone = state.clone()
        clone_next, clone_dist = scorer.step(clone, w)
        np.testing.assert_array_equal(again_dist, clone_dist)
        repeat_state, repeat_dist = scorer.step(state, w)
        np.testing.assert_array_equal(again_dist, repeat_dist)
        state = again_state


class TestUniformScorer:
    def test_every_entry_is_log_inverse_size(self):
        s = UniformScorer(4)
        state = s.initial_state()
        np.testing.assert_allclose(state.log_probs, math.log(0.25), rtol=0, atol=1e-12)
        assert state.log_probs.shape == (4,)

    def test_contract(self):
        scorer_contract_checks(UniformScorer(7), tol=1e-12)

    def test_rejects_bad_sizes(self):
        with pytest.raises(DataError):
            UniformScorer(0)
        with pytest.raises(DataError):
            UniformScorer(4, eos=9)


class TestNGramTraining:
    def test_hand_computed_bigram(self):
        # corpus "a b <eos>", k=2, alpha=1, |V|=3: P(b|a) = (1+1)/(1+3)
        v = Vocabulary.from_tokens(["a", "b"])
        a, b = v.id("a"), v.id("b")
        m = ngram_train([[a, b, v.eos]], order=2, alpha=1.0, vocab=v)
        assert m.logprob([a], b) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_large_alpha_approaches_uniform(self):
        v = make_vocab(4)
        m = ngram_train([[0, 1, v.eos]], order=2, alpha=1e9, vocab=v)
        state = m.initial_state()
        np.testing.assert_allclose(state.log_probs, math.log(1 / 4), atol=1e-8)

    def test_every_distribution_sums_to_one(self, rng):
        v = make_vocab(6)
        m = random_ngram(rng, v, order=3, sentences=100)
        contexts = [
            [int(x) for x in rng.integers(0, len(v), size=rng.integers(0, 4))]
            for _ in range(100)
        ]
        for ctx in contexts:
            total = sum(math.exp(m.logprob(ctx, w)) for w in range(len(v)))
            assert abs(total - 1.0) < 1e-12

    def test_empty_corpus_rejected(self):
        v = make_vocab(3)
        with pytest.raises(DataError):
            ngram_train([], order=2, alpha=1.0, vocab=v)

    def test_zero_order_rejected(self):
        v = make_vocab(3)
        with pytest.raises(DataError):
            ngram_train([[0, v.eos]], order=0, alpha=1.0, vocab=v)

    def test_zero_alpha_rejected(self):
        v = make_vocab(3)
        with pytest.raises(DataError):
            ngram_train([[0, v.eos]], order=2, alpha=0.0, vocab=v)


class TestNGramLogprob:
    def test_unseen_context_backs_off_to_uniform(self):
        v = make_vocab(5)
        m = ngram_train([[0, v.eos]], order=2, alpha=1.0, vocab=v)
        # context token 3 was never seen, every count is zero
        assert m.logprob([3], 2) == pytest.approx(math.log(1 / 5), abs=1e-12)

    def test_alias_matches_method(self):
        v = make_vocab(4)
        m = ngram_train([[0, 1, v.eos]], order=2, alpha=0.5, vocab=v)
        assert ngram_logprob(m, [0], 1) == m.logprob([0], 1)

    def test_uses_only_last_context_tokens(self, rng):
        v = make_vocab(5)
        m = random_ngram(rng, v, order=2)
        long_ctx = [3, 1, 0, 2]
        assert m.logprob(long_ctx, 1) == m.logprob([2], 1)

    def test_always_finite(self, rng):
        v = make_vocab(4)
        m = random_ngram(rng, v, order=2)
        for ctx in ([], [0], [1, 2], [3, 3, 3]):
            for w in range(len(v)):
                assert math.isfinite(m.logprob(ctx, w))


class TestScoreStep:
    def test_stepping_matches_direct_queries(self, rng):
        v = make_vocab(5)
        m = random_ngram(rng, v, order=2)
        seq = [0, 1, v.eos]
        via_steps = sequence_logprob(m, seq)
        direct = ngram_sequence_logprob(m, seq)
        assert via_steps == pytest.approx(direct, abs=1e-12)

    def test_foreign_state_rejected(self, rng):
        v = make_vocab(5)
        m1 = random_ngram(rng, v, order=2)
        m2 = random_ngram(rng, v, order=2)
        state = m1.initial_state()
        with pytest.raises(ContractError):
            m2.step(state, 0)
        with pytest.raises(ContractError):
            m1.step(state, 999)

    def test_contract(self, rng):
        v = make_vocab(6)
        scorer_contract_checks(random_ngram(rng, v, order=3), tol=1e-12)

    def test_module_level_alias(self, rng):
        v = make_vocab(4)
        m = random_ngram(rng, v)
        state = m.initial_state()
        nxt, dist = score_step(m, state, 1)
        np.testing.assert_array_equal(dist, nxt.log_probs)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_chain_rule_property(self, seed):
        rng = np.random.default_rng(seed)
        v = make_vocab(int(rng.integers(3, 7)))
        m = random_ngram(rng, v, order=int(rng.integers(1, 4)))
        seq = [int(x) for x in rng.integers(0, len(v), size=rng.integers(1, 7))]
        assert sequence_logprob(m, seq) == pytest.approx(
            ngram_sequence_logprob(m, seq), abs=1e-12
        )

    def test_deepcopied_state_steps_identically(self, rng):
        v = make_vocab(5)
        m = random_ngram(rng, v)
        state = m.initial_state()
        twin = copy.deepcopy(state)
        _, d1 = m.step(state, 2)
        _, d2 = twin.owner.step(twin, 2)
        np.testing.assert_array_equal(d1, d2)


class TestPersistence:
    def test_round_trip_preserves_scores(self, rng, tmp_path):
        v = make_vocab(6)
        m = random_ngram(rng, v, order=3, sentences=40)
        path = tmp_path / "model.json"
        m.save(path)
        m2 = NGramModel.load(path)
        assert m2.order == m.order and m2.alpha == m.alpha
        assert m2.vocab == m.vocab
        for ctx in ([], [0, 1], [5, 2]):
            for w in range(len(v)):
                assert m2.logprob(ctx, w) == m.logprob(ctx, w)

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"some": "thing"}')
        with pytest.raises(DataError):
            NGramModel.load(path)


class TestCorpusLoading:
    def test_lowercases_and_appends_eos(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("A Man on a Bus\nthe bus\n", encoding="utf-8")
        sequences, vocab = load_corpus(path)
        assert vocab.decode(sequences[0]) == ["a", "man", "on", "a", "bus", "<eos>"]
        assert all(seq[-1] == vocab.eos for seq in sequences)

    def test_existing_vocabulary_reused(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("a man\n", encoding="utf-8")
        vocab = Vocabulary.from_tokens(["a", "man", "extra"])
        sequences, v2 = load_corpus(path, vocab)
        assert v2 is vocab

    def test_blank_lines_skipped_and_empty_file_rejected(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("\n   \n", encoding="utf-8")
        with pytest.raises(DataError):
            load_corpus(path)
