"""Soft-attention LSTM decoder: one word per step from attended clip features.

Per step, given the feature rows V, the previous word and the recurrent
state, the decoder scores every feature row against the hidden state,
softmax-normalizes the scores into attention weights, scales the attended
sum by a scalar sigmoid gate (so connective words can downweight the visual
input), feeds [context, embedding] through a standard LSTM cell, and predicts
the next word from [context, hidden] with an un-projected embedding residual.
The graph is built word-by-word: each step's prediction is materialized
before the next step begins.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, VocabError
from .text import EOS_ID, SOS_ID


@dataclass
class DecoderState:
    h: T.Tensor
    c: T.Tensor
    t: int = 0


@dataclass
class StepOutput:
    p: T.Tensor          # probability vector over the vocabulary
    alpha: T.Tensor      # attention weights over the n feature rows
    beta: T.Tensor       # scalar gate in (0, 1)
    state: DecoderState


def init_matrix(rng, shape):
    """uniform(-r, r) with r = 1/sqrt(fan_in); fan_in is the last extent."""
    r = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-r, r, size=shape)


class SALSTMDecoder:
    """Parameter container plus the per-step decoding operations.

    Weight matrices are uniform(-1/sqrt(fan_in), ..) initialised from the
    given generator; all biases start at zero.  One embedding table serves
    both the LSTM input concatenation and the prediction residual.
    """

    def __init__(self, vocab_size, d_v, d_h=32, d_e=24, d_a=None, rng=None):
        if d_a is None:
            d_a = d_h
        if rng is None:
            rng = np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.d_v, self.d_h, self.d_e, self.d_a = d_v, d_h, d_e, d_a

        def weight(*shape):
            return T.Tensor(init_matrix(rng, shape), requires_grad=True)

        def bias(*shape):
            return T.Tensor(np.zeros(shape), requires_grad=True)

        self.params = {
            # attention scoring
            "W_a": weight(1, d_a),
            "W_eh": weight(d_a, d_h),
            "W_ev": weight(d_a, d_v),
            "b_e": bias(d_a),
            "b_a": bias(),
            # scalar gate on the attended context
            "W_beta": weight(1, d_h),
            "b_beta": bias(),
            # LSTM cell over [context, embedding]
            "W_ih": weight(4 * d_h, d_v + d_e),
            "b_ih": bias(4 * d_h),
            "W_hh": weight(4 * d_h, d_h),
            "b_hh": bias(4 * d_h),
            # output head with embedding residual
            "W_u": weight(d_e, d_v + d_h),
            "b_u": bias(d_e),
            "W_p": weight(vocab_size, d_e),
            "b_p": bias(vocab_size),
            "E": weight(vocab_size, d_e),
            # initial state maps
            "W_h": weight(d_h, d_v),
            "b_h": bias(d_h),
            "W_c": weight(d_h, d_v),
            "b_c": bias(d_h),
        }

    def named_parameters(self):
        return dict(self.params)

    def __getattr__(self, name):
        params = object.__getattribute__(self, "params")
        if name in params:
            return params[name]
        raise AttributeError(name)

    def init_state(self, V):
        """h0 = tanh(W_h mean(V) + b_h), c0 = tanh(W_c mean(V) + b_c)."""
        if V.ndim != 2 or V.shape[0] == 0:
            raise ContractError(f"init_state needs a nonempty feature matrix, got {V.shape}")
        v_bar = T.mul(T.tensor_sum(V, axis=0), 1.0 / V.shape[0])
        h0 = T.tanh(T.add(T.matmul(self.W_h, v_bar), self.b_h))
        c0 = T.tanh(T.add(T.matmul(self.W_c, v_bar), self.b_c))
        return DecoderState(h=h0, c=c0, t=0)

    def attend(self, V, h_prev):
        """Score each feature row, softmax to alpha, gate the weighted sum.

        Returns (alpha (n,), beta scalar, context (d_v,)) where
        context = beta * sum_i alpha_i V_i.
        """
        n = V.shape[0]
        if n < 1:
            raise ContractError("attend needs at least one feature row")
        proj_h = T.matmul(self.W_eh, h_prev)                       # (d_a,)
        proj_v = T.matmul(V, T.transpose(self.W_ev))               # (n, d_a)
        hidden = T.tanh(T.add(T.add(proj_v, proj_h), self.b_e))
        scores = T.reshape(T.matmul(hidden, T.transpose(self.W_a)), (n,))
        scores = T.add(scores, self.b_a)
        alpha = T.softmax(scores)
        beta = T.reshape(
            T.sigmoid(T.add(T.matmul(self.W_beta, h_prev), self.b_beta)), ())
        weighted = T.reshape(T.matmul(T.reshape(alpha, (1, n)), V), (self.d_v,))
        context = T.mul(beta, weighted)
        return alpha, beta, context

    def lstm_step(self, z, state):
        """Standard LSTM cell (gate order i, f, g, o)."""
        d_h = self.d_h
        gates = T.add(
            T.add(T.matmul(self.W_ih, z), self.b_ih),
            T.add(T.matmul(self.W_hh, state.h), self.b_hh),
        )
        i = T.sigmoid(T.narrow(gates, 0, d_h))
        f = T.sigmoid(T.narrow(gates, d_h, d_h))
        g = T.tanh(T.narrow(gates, 2 * d_h, d_h))
        o = T.sigmoid(T.narrow(gates, 3 * d_h, d_h))
        c = T.add(T.mul(f, state.c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return DecoderState(h=h, c=c, t=state.t + 1)

    def step(self, V, y_prev, state):
        """One decoding step: attend, recur, predict the next-word distribution."""
        y_prev = int(y_prev)
        if not 0 <= y_prev < self.vocab_size:
            raise VocabError(f"token id {y_prev} outside vocabulary of size {self.vocab_size}")
        alpha, beta, context = self.attend(V, state.h)
        emb = T.take_row(self.E, y_prev)
        z = T.concat(context, emb)
        new_state = self.lstm_step(z, state)
        u = T.add(T.add(T.matmul(self.W_u, T.concat(context, new_state.h)), emb),
                  self.b_u)
        p = T.softmax(T.add(T.matmul(self.W_p, T.tanh(u)), self.b_p))
        return StepOutput(p=p, alpha=alpha, beta=beta, state=new_state)

    def teacher_forced_rollout(self, V, targets, max_len=None):
        """Run one step per target token, feeding the ground-truth history.

        ``targets`` must end with <EOS>.  Returns the per-step probability
        vectors and the (C, n) attention matrix consumed by the attention
        loss.
        """
        targets = [int(t) for t in targets]
        if not targets or targets[-1] != EOS_ID:
            raise ContractError("rollout targets must end with <EOS>")
        if max_len is not None and len(targets) > max_len:
            raise ContractError(
                f"target length {len(targets)} exceeds max caption length {max_len}")
        state = self.init_state(V)
        probs, alphas = [], []
        prev = SOS_ID
        for y in targets:
            out = self.step(V, prev, state)
            probs.append(out.p)
            alphas.append(out.alpha)
            state = out.state
            prev = y
        return probs, T.stack(alphas)
