"""Beam search and greedy decoding over a stepwise decoder.

Any object with ``init_state(V)`` and ``step(V, y_prev, state)`` returning a
StepOutput-like value (``.p`` probability tensor, ``.state``) can be decoded;
the feature matrix V is held fixed across iterations.  Hypotheses are scored
by raw cumulative log-probability (no length normalization); ties are broken
by the token sequence itself, so lower token ids and earlier finishes win
deterministically.  Finished hypotheses retire to a pool; the live beam
refills from unfinished candidates.  <PAD> and <SOS> are never expanded.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .text import EOS_ID, PAD_ID, SOS_ID


@dataclass
class BeamHypothesis:
    tokens: list            # emitted ids, including the terminal <EOS> if any
    score: float            # cumulative log-probability
    state: object           # decoder state snapshot
    finished: bool = False


def _sort_key(item):
    score, tokens = item[0], item[1]
    return (-score, tokens)


def beam_search(decoder, V, beam_size=5, max_len=30,
                sos_id=SOS_ID, eos_id=EOS_ID, banned_ids=(PAD_ID, SOS_ID)):
    """Return finished hypotheses, best (highest log-prob) first."""
    if beam_size < 1:
        raise ContractError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    banned = set(banned_ids)

    with T.no_grad():
        live = [BeamHypothesis([], 0.0, decoder.init_state(V))]
        pool = []
        for _ in range(max_len):
            candidates = []
            for hyp in live:
                prev = hyp.tokens[-1] if hyp.tokens else sos_id
                out = decoder.step(V, prev, hyp.state)
                log_p = np.log(np.maximum(out.p.data, 1e-300))
                for tok in range(log_p.shape[0]):
                    if tok in banned:
                        continue
                    candidates.append(
                        (hyp.score + float(log_p[tok]), hyp.tokens + [tok], out.state))
            candidates.sort(key=_sort_key)
            live = []
            for score, tokens, state in candidates[:beam_size]:
                done = tokens[-1] == eos_id or len(tokens) >= max_len
                hyp = BeamHypothesis(tokens, score, state, finished=done)
                if done:
                    pool.append(hyp)
                else:
                    live.append(hyp)
            if not live:
                break
    pool.sort(key=lambda h: (-h.score, h.tokens))
    return pool


def greedy_decode(decoder, V, max_len=30,
                  sos_id=SOS_ID, eos_id=EOS_ID, banned_ids=(PAD_ID, SOS_ID)):
    """Argmax decoding (the beam_size=1 oracle); ties go to the lowest id."""
    banned = sorted(set(banned_ids))
    tokens = []
    with T.no_grad():
        state = decoder.init_state(V)
        prev = sos_id
        for _ in range(max_len):
            out = decoder.step(V, prev, state)
            p = out.p.data.copy()
            p[banned] = -np.inf
            tok = int(np.argmax(p))
            tokens.append(tok)
            if tok == eos_id:
                break
            state = out.state
            prev = tok
    return tokens
