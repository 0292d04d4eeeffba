"""Training losses: negative log-likelihood plus the averaged attention loss.

The total is nll + lambda * adsa.  The attention term pushes every feature
row's attention mass, summed over the caption, toward 1, i.e. toward equal
attention across frames over the course of generation.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .text import PAD_ID

LOG_FLOOR = 1e-12

_clamp_count = 0


def clamp_count():
    """Number of probabilities clamped to the log floor so far."""
    return _clamp_count


def reset_clamp_count():
    global _clamp_count
    _clamp_count = 0


@dataclass
class LossConfig:
    lam: float = 0.70602
    adsa_normalizer: str = "num_frames"   # or "feature_dim"
    reduction: str = "mean"               # batch reduction: "mean" or "sum"
    feature_dim: int | None = None        # used only by the feature_dim mode

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.adsa_normalizer not in ("num_frames", "feature_dim"):
            raise ContractError(f"unknown adsa_normalizer {self.adsa_normalizer!r}")
        if self.reduction not in ("mean", "sum"):
            raise ContractError(f"unknown reduction {self.reduction!r}")


def _example_nll(probs, targets):
    global _clamp_count
    if len(probs) != len(targets):
        raise ContractError(
            f"{len(probs)} probability vectors vs {len(targets)} targets")
    terms = None
    for p, y in zip(probs, targets):
        y = int(y)
        if y == PAD_ID:
            continue
        picked = T.take(p, y)
        if picked.data < LOG_FLOOR:
            _clamp_count += 1
        term = T.neg(T.log(picked, floor=LOG_FLOOR))
        terms = term if terms is None else T.add(terms, term)
    return terms if terms is not None else T.Tensor(0.0)


def nll_loss(prob_seqs, target_seqs, reduction="mean"):
    """-sum_t log p_t[y_t] per example, then reduced over the batch.

    Accepts a single example (list of probability tensors + list of ids) or
    a batch (list of such pairs).  Padding positions are excluded; exact
    zeros are clamped at 1e-12 and counted (see ``clamp_count``).
    """
    if prob_seqs and isinstance(prob_seqs[0], T.Tensor):
        prob_seqs, target_seqs = [prob_seqs], [target_seqs]
    if not prob_seqs:
        raise ContractError("nll_loss over an empty batch")
    total = None
    for probs, targets in zip(prob_seqs, target_seqs):
        ex = _example_nll(probs, targets)
        total = ex if total is None else T.add(total, ex)
    if reduction == "mean":
        total = T.mul(total, 1.0 / len(prob_seqs))
    return total


def adsa_loss(alpha, normalizer="num_frames", feature_dim=None):
    """(1/K) sum_k (1 - sum_t alpha[t, k])^2 over the attention matrix.

    K is the number of attention locations (frames) by default; the
    feature_dim mode divides by the feature width instead, a constant
    factor absorbed by lambda.
    """
    if not isinstance(alpha, T.Tensor):
        alpha = T.Tensor(np.asarray(alpha))
    if alpha.ndim != 2:
        raise ContractError(f"adsa_loss expects a C x n matrix, got {alpha.shape}")
    n = alpha.shape[1]
    if normalizer == "num_frames":
        k = n
    else:
        if feature_dim is None:
            raise ContractError("feature_dim normalizer needs feature_dim")
        k = feature_dim
    col_sums = T.tensor_sum(alpha, axis=0)
    deficit = T.add(T.neg(col_sums), 1.0)
    return T.mul(T.tensor_sum(T.mul(deficit, deficit)), 1.0 / k)


def total_loss(nll, adsa, cfg):
    """nll + lambda * adsa, with non-finite inputs rejected by name."""
    for name, part in (("nll", nll), ("adsa", adsa)):
        if not np.isfinite(part.data).all():
            raise NumericError(f"total_loss: non-finite {name} component")
    return T.add(nll, T.mul(adsa, cfg.lam))


def caption_losses(prob_seqs, target_seqs, alpha_mats, cfg):
    """Batch loss triple (total, nll, adsa) used by the training loop."""
    nll = nll_loss(prob_seqs, target_seqs, reduction=cfg.reduction)
    adsa = None
    for mat in alpha_mats:
        one = adsa_loss(mat, cfg.adsa_normalizer, cfg.feature_dim)
        adsa = one if adsa is None else T.add(adsa, one)
    if cfg.reduction == "mean":
        adsa = T.mul(adsa, 1.0 / len(alpha_mats))
    return total_loss(nll, adsa, cfg), nll, adsa
