"""Gradient-accumulated training and the two-stage schedule.

One optimizer update fires after every ``accumulate_step`` mini-batches:
each mini-batch loss is divided by accumulate_step before backward, so the
accumulated gradient equals the gradient of the mean loss over the whole
effective batch (accumulate_step x mini_batch_size examples).  The
mini-batch counter persists across epochs, so leftover mini-batches at an
epoch end carry into the next epoch and never trigger a partial update.

Stage 1 trains the decoder against a frozen encoder; stage 2 unfreezes the
encoder and continues end-to-end.  Both stages early-stop on validation NLL
with a patience counter, evaluate once at stage start as the baseline, and
finish by restoring the best-validation parameters seen during the stage.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .losses import LossConfig, caption_losses
from .optim import Adam, clip_gradients


@dataclass
class TrainSettings:
    mini_batch_size: int = 8
    accumulate_step: int = 4
    clip_low: float = -10.0
    clip_high: float = 10.0
    stage1_max_epochs: int = 30
    stage2_max_epochs: int = 30
    eval_every: int = 2
    patience: int = 3
    shuffle: bool = True
    seed: int = 0

    @property
    def effective_batch(self):
        return self.accumulate_step * self.mini_batch_size

    @classmethod
    def from_config(cls, config):
        train = config["train"]
        return cls(
            mini_batch_size=train["mini_batch_size"],
            accumulate_step=train["accumulate_step"],
            clip_low=train["clip_low"],
            clip_high=train["clip_high"],
            stage1_max_epochs=train["stage1_max_epochs"],
            stage2_max_epochs=train["stage2_max_epochs"],
            eval_every=train["eval_every"],
            patience=train["patience"],
            shuffle=train["shuffle"],
            seed=config["seed"],
        )


def loss_config_from(config):
    return LossConfig(
        lam=config["loss"]["lambda"],
        adsa_normalizer=config["loss"]["adsa_normalizer"],
        reduction=config["loss"]["reduction"],
        feature_dim=config["encoder"]["d_v"],
    )


def flatten_examples(clips):
    """One training example per (clip, reference caption) pair."""
    return [(clip, tokens) for clip in clips for tokens in clip.tokens]


def batch_loss(model, batch, loss_cfg, max_len):
    """Forward a mini-batch and return (total Tensor, nll float, adsa float)."""
    prob_seqs, target_seqs, alpha_mats = [], [], []
    for clip, tokens in batch:
        V = model.encode_clip(clip)
        targets = model.vocab.encode(tokens, max_len)
        probs, alphas = model.decoder.teacher_forced_rollout(V, targets, max_len=max_len)
        prob_seqs.append(probs)
        target_seqs.append(targets)
        alpha_mats.append(alphas)
    total, nll, adsa = caption_losses(prob_seqs, target_seqs, alpha_mats, loss_cfg)
    return total, float(nll.data), float(adsa.data)


def evaluate_nll(model, clips, loss_cfg, max_len):
    """Mean per-example NLL over a split, without touching gradients."""
    examples = flatten_examples(clips)
    if not examples:
        raise ContractError("evaluate_nll over an empty split")
    total = 0.0
    with T.no_grad():
        for clip, tokens in examples:
            V = model.encode_clip(clip)
            targets = model.vocab.encode(tokens, max_len)
            probs, _ = model.decoder.teacher_forced_rollout(V, targets, max_len=max_len)
            nll = 0.0
            for p, y in zip(probs, targets):
                nll -= float(np.log(max(p.data[y], 1e-12)))
            total += nll
    return total / len(examples)


class UpdateLog:
    """Per-update records, optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def append(self, record):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class TrainState:
    """Accumulation state threaded across calls so the mini-batch counter
    (and any partial gradient window) survives epoch and evaluation
    boundaries within a stage."""
    batch_count: int = 0
    update_idx: int = 0
    window_total: float = 0.0
    window_nll: float = 0.0
    window_adsa: float = 0.0


def accumulate_train(model, optimizer, examples, settings, loss_cfg, max_len,
                     *, stage, epochs, log=None, rng=None, state=None):
    """Run ``epochs`` passes with gradient accumulation; returns the log.

    Gradients are zeroed when a fresh state is started; every
    accumulate_step mini-batches the gradients are clipped elementwise,
    each unfrozen group takes an Adam step, and the gradients reset.
    Mini-batches beyond the last full window stay accumulated in the
    optimizer state for the next call.
    """
    if len(examples) < settings.mini_batch_size:
        raise ContractError(
            f"dataset of {len(examples)} examples is smaller than one "
            f"mini-batch of {settings.mini_batch_size}")
    if log is None:
        log = UpdateLog()
    if rng is None:
        rng = np.random.default_rng(settings.seed)
    if state is None:
        state = TrainState()
    if state.batch_count == 0:
        optimizer.zero_grad()

    group_lrs = {g.name: g.lr for g in optimizer.groups}
    for _ in range(epochs):
        order = rng.permutation(len(examples)) if settings.shuffle \
            else np.arange(len(examples))
        for start in range(0, len(order), settings.mini_batch_size):
            batch = [examples[i] for i in order[start:start + settings.mini_batch_size]]
            total, nll, adsa = batch_loss(model, batch, loss_cfg, max_len)
            normalized = T.mul(total, 1.0 / settings.accumulate_step)
            T.backward(normalized)
            state.window_total += float(total.data) / settings.accumulate_step
            state.window_nll += nll / settings.accumulate_step
            state.window_adsa += adsa / settings.accumulate_step
            state.batch_count += 1
            if state.batch_count % settings.accumulate_step == 0:
                clip_gradients(optimizer.all_params(),
                               settings.clip_low, settings.clip_high)
                norms = {g.name: g.grad_norm() for g in optimizer.groups}
                optimizer.step()
                optimizer.zero_grad()
                log.append({
                    "update_idx": state.update_idx,
                    "stage": stage,
                    "loss_total": state.window_total,
                    "loss_nll": state.window_nll,
                    "loss_adsa": state.window_adsa,
                    "grad_norm_encoder": norms.get("encoder", 0.0),
                    "grad_norm_decoder": norms.get("decoder", 0.0),
                    "lr": group_lrs,
                })
                state.update_idx += 1
                state.window_total = state.window_nll = state.window_adsa = 0.0
    return log


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


def _restore(model, snapshot):
    for name, p in model.named_parameters().items():
        p.data[...] = snapshot[name]
    model._feature_cache.clear()


def _run_stage(model, examples, val_clips, settings, loss_cfg, max_len,
               *, stage, max_epochs, log):
    """Early-stopped training for one stage; leaves the best params loaded."""
    rng = np.random.default_rng(settings.seed + stage)
    optimizer = Adam(model.param_groups())
    state = TrainState()
    best_val = evaluate_nll(model, val_clips, loss_cfg, max_len)
    best_params = _snapshot(model)
    stale = 0
    epochs_done = 0
    while epochs_done < max_epochs:
        chunk = min(settings.eval_every, max_epochs - epochs_done)
        accumulate_train(model, optimizer, examples, settings, loss_cfg, max_len,
                         stage=stage, epochs=chunk, log=log, rng=rng, state=state)
        epochs_done += chunk
        val = evaluate_nll(model, val_clips, loss_cfg, max_len)
        if val < best_val:
            best_val = val
            best_params = _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale >= settings.patience:
                break
    _restore(model, best_params)
    return best_val


def two_stage_run(model, splits, config, out_dir=None, stages=(1, 2)):
    """Stage 1 (frozen encoder) then stage 2 (end-to-end); checkpoints at each
    stage boundary.  Returns a summary dict with the per-stage validation NLL.
    """
    settings = TrainSettings.from_config(config)
    loss_cfg = loss_config_from(config)
    max_len = config["text"]["max_caption_len"]
    examples = flatten_examples(splits["train"])
    val_clips = splits["val"] if splits.get("val") else splits["train"]

    log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
    log = UpdateLog(log_path)
    summary = {}

    try:
        if 1 in stages:
            model.set_encoder_trainable(False)
            summary["stage1_val_nll"] = _run_stage(
                model, examples, val_clips, settings, loss_cfg, max_len,
                stage=1, max_epochs=settings.stage1_max_epochs, log=log)
            if out_dir:
                model.save(os.path.join(out_dir, "stage1.ckpt"), stage=1)
        if 2 in stages:
            if config["encoder"]["backend"] != "feature_file":
                model.set_encoder_trainable(True)
            summary["stage2_val_nll"] = _run_stage(
                model, examples, val_clips, settings, loss_cfg, max_len,
                stage=2, max_epochs=settings.stage2_max_epochs, log=log)
            if out_dir:
                model.save(os.path.join(out_dir, "stage2.ckpt"), stage=2)
    finally:
        log.close()
    summary["log"] = log.records
    return summary
