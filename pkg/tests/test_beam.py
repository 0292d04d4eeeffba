import itertools
import math

import numpy as np
import pytest

from etecap import tensor as T
from etecap.beam import BeamHypothesis, beam_search, greedy_decode
from etecap.decoder import SALSTMDecoder
from etecap.errors import ContractError
from etecap.text import EOS_ID, PAD_ID, SOS_ID


class StubDecoder:
    """Fixed step distributions: p depends only on (step index, previous token)."""

    def __init__(self, vocab, max_steps, rng=None, uniform=False):
        self.vocab = vocab
        if uniform:
            self.table = np.full((max_steps, vocab, vocab), 1.0 / vocab)
        else:
            raw = rng.uniform(0.05, 1.0, size=(max_steps, vocab, vocab))
            self.table = raw / raw.sum(axis=-1, keepdims=True)

    def init_state(self, V):
        return 0

    def step(self, V, y_prev, state):
        p = self.table[min(state, self.table.shape[0] - 1), int(y_prev)]
        out = lambda: None
        out.p = T.Tensor(p)
        out.state = state + 1
        return out


def brute_force_best(stub, sos, eos, max_len):
    """Enumerate every finishable sequence and return (best_score, tokens)."""
    best = None

    def extend(tokens, score, step, prev):
        nonlocal best
        if tokens and (tokens[-1] == eos or len(tokens) >= max_len):
            cand = (score, tokens)
            if best is None or (-cand[0], cand[1]) < (-best[0], best[1]):
                best = cand
            return
        p = stub.table[min(step, stub.table.shape[0] - 1), prev]
        for tok in range(stub.vocab):
            extend(tokens + [tok], score + math.log(p[tok]), step + 1, tok)

    extend([], 0.0, 0, sos)
    return best


def test_beam_size_one_equals_greedy_stub():
    rng = np.random.default_rng(0)
    for seed in range(10):
        stub = StubDecoder(5, 4, rng=np.random.default_rng(seed))
        hyps = beam_search(stub, None, beam_size=1, max_len=4,
                           sos_id=0, eos_id=2, banned_ids=())
        greedy = greedy_decode(stub, None, max_len=4,
                               sos_id=0, eos_id=2, banned_ids=())
        assert hyps[0].tokens == greedy


def test_beam_size_one_equals_greedy_real_decoder():
    for seed in range(5):
        dec = SALSTMDecoder(8, 4, d_h=3, d_e=2,
                            rng=np.random.default_rng(seed))
        V = T.Tensor(np.random.default_rng(seed + 100).normal(size=(3, 4)))
        hyps = beam_search(dec, V, beam_size=1, max_len=6)
        assert hyps[0].tokens == greedy_decode(dec, V, max_len=6)


def test_beam_matches_exhaustive_enumeration_toy():
    for seed in range(8):
        stub = StubDecoder(3, 3, rng=np.random.default_rng(40 + seed))
        hyps = beam_search(stub, None, beam_size=27, max_len=3,
                           sos_id=0, eos_id=2, banned_ids=())
        best_score, best_tokens = brute_force_best(stub, sos=0, eos=2, max_len=3)
        assert hyps[0].tokens == best_tokens
        assert hyps[0].score == pytest.approx(best_score, abs=1e-12)


def test_uniform_model_scores_and_tie_rule():
    stub = StubDecoder(5, 6, uniform=True)
    hyps = beam_search(stub, None, beam_size=3, max_len=4,
                       sos_id=0, eos_id=2, banned_ids=())
    for hyp in hyps:
        assert hyp.score == pytest.approx(len(hyp.tokens) * math.log(1 / 5), abs=1e-12)
    # earliest finish with the lowest token id wins: a bare <EOS>
    assert hyps[0].tokens == [2]


def test_monotone_improvement_wider_beam():
    for seed in range(30):
        stub = StubDecoder(4, 4, rng=np.random.default_rng(200 + seed))
        best = {}
        for b in (1, 2, 3, 6, 64):
            hyps = beam_search(stub, None, beam_size=b, max_len=4,
                               sos_id=0, eos_id=2, banned_ids=())
            best[b] = hyps[0].score
        assert best[2] >= best[1] - 1e-12
        assert best[3] >= best[2] - 1e-12
        assert best[6] >= best[3] - 1e-12
        assert best[64] >= best[6] - 1e-12


def test_emitted_captions_clean():
    for seed in range(5):
        dec = SALSTMDecoder(9, 4, d_h=3, d_e=2, rng=np.random.default_rng(seed))
        V = T.Tensor(np.random.default_rng(seed).normal(size=(3, 4)))
        for hyp in beam_search(dec, V, beam_size=4, max_len=5):
            assert PAD_ID not in hyp.tokens
            assert SOS_ID not in hyp.tokens
            if EOS_ID in hyp.tokens:
                assert hyp.tokens.index(EOS_ID) == len(hyp.tokens) - 1
            assert hyp.finished
            assert len(hyp.tokens) <= 5


def test_greedy_respects_max_len():
    stub = StubDecoder(4, 10, uniform=True)
    # uniform: greedy picks token 0 forever (never eos=3 here), stops at max_len
    tokens = greedy_decode(stub, None, max_len=7, sos_id=0, eos_id=3, banned_ids=())
    assert len(tokens) == 7


def test_peaked_model_recovers_target():
    target = [4, 5, 6, EOS_ID]
    vocab = 8

    class Peaked:
        def init_state(self, V):
            return 0

        def step(self, V, y_prev, state):
            p = np.full(vocab, 1e-6)
            p[target[min(state, len(target) - 1)]] = 1.0
            p /= p.sum()
            out = lambda: None
            out.p = T.Tensor(p)
            out.state = state + 1
            return out

    assert greedy_decode(Peaked(), None, max_len=10) == target
    assert beam_search(Peaked(), None, beam_size=3, max_len=10)[0].tokens == target


def test_beam_rejects_bad_sizes():
    stub = StubDecoder(3, 2, uniform=True)
    with pytest.raises(ContractError):
        beam_search(stub, None, beam_size=0, max_len=3)
    with pytest.raises(ContractError):
        beam_search(stub, None, beam_size=2, max_len=0)


def test_hypothesis_scores_non_increasing_with_length():
    # log-prob sums only fall as tokens append
    stub = StubDecoder(4, 5, rng=np.random.default_rng(9))
    hyps = beam_search(stub, None, beam_size=4, max_len=5,
                       sos_id=0, eos_id=2, banned_ids=())
    for hyp in hyps:
        assert hyp.score <= 0.0
