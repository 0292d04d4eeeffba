import copy

import numpy as np
import pytest

from etecap import tensor as T
from etecap.config import DEFAULTS, validate
from etecap.data import CaptionedClip
from etecap.errors import ContractError
from etecap.losses import LossConfig
from etecap.model import CaptionModel
from etecap.optim import Adam
from etecap.text import Vocabulary, tokenize
from etecap.training import (
    TrainSettings, TrainState, accumulate_train, batch_loss, evaluate_nll,
    flatten_examples, loss_config_from, two_stage_run,
)

WORDS = ["red", "blue", "square", "circle", "left", "right"]


def feature_clips(n_clips, n_frames=3, d_v=6, seed=0):
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        caption = f"a {WORDS[i % 2]} {WORDS[2 + i % 2]} moves {WORDS[4 + i % 2]}"
        clip = CaptionedClip(id=f"clip{i}", captions=[caption],
                             tokens=[tokenize(caption)], feature_path="<memory>")
        clip._features = rng.normal(size=(n_frames, d_v))
        clips.append(clip)
    return clips


def frame_clips(n_clips, n_frames=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        caption = f"a {WORDS[i % 2]} {WORDS[2 + i % 2]} moves {WORDS[4 + i % 2]}"
        clip = CaptionedClip(id=f"clip{i}", captions=[caption],
                             tokens=[tokenize(caption)], frame_dir="<memory>")
        clip._frames = [rng.uniform(size=(size, size, 3)) for _ in range(n_frames)]
        clips.append(clip)
    return clips


def tiny_config(backend="feature_file", **train_kw):
    cfg = copy.deepcopy(DEFAULTS)
    cfg["seed"] = 0
    cfg["encoder"].update({
        "backend": backend, "d_v": 6, "num_frames": 3 if backend == "feature_file" else 2,
        "trainable": backend != "feature_file", "image_size": 8,
        "channels": [2, 3], "kernel": 3, "stride": 2,
    })
    cfg["decoder"].update({"d_h": 4, "d_e": 3, "d_a": 4})
    cfg["text"]["max_caption_len"] = 8
    cfg["train"].update({
        "mini_batch_size": 2, "accumulate_step": 2, "eval_every": 1,
        "stage1_max_epochs": 2, "stage2_max_epochs": 2, "patience": 2,
        "shuffle": False,
    })
    cfg["train"].update(train_kw)
    return validate(cfg)


def build(config, clips):
    vocab = Vocabulary.build([t for c in clips for t in c.tokens])
    return CaptionModel(config, vocab)


def grads_of(model):
    return {name: (None if p.grad is None else p.grad.copy())
            for name, p in model.named_parameters().items()}


def test_accumulated_gradient_equals_full_batch():
    config = tiny_config()
    clips = feature_clips(8)
    model = build(config, clips)
    examples = flatten_examples(clips)
    loss_cfg = loss_config_from(config)
    params = model.named_parameters()

    # accumulate 4 x 2 with loss/accumulate_step
    for p in params.values():
        p.grad = None
    for k in range(4):
        total, _, _ = batch_loss(model, examples[2 * k:2 * k + 2], loss_cfg, 8)
        T.backward(T.mul(total, 1.0 / 4))
    accumulated = grads_of(model)

    # one batch of 8 with mean reduction
    for p in params.values():
        p.grad = None
    total, _, _ = batch_loss(model, examples, loss_cfg, 8)
    T.backward(total)
    full = grads_of(model)

    for name in params:
        a, b = accumulated[name], full[name]
        if a is None and b is None:
            continue
        denom = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
        assert np.abs(a - b).max() / denom < 1e-10, name


def test_accumulate_step_one_is_plain_minibatch():
    clips = feature_clips(4)

    def run(acc, lr_scale=1):
        config = tiny_config(accumulate_step=acc, mini_batch_size=2)
        model = build(config, clips)
        settings = TrainSettings.from_config(config)
        opt = Adam(model.param_groups())
        accumulate_train(model, opt, flatten_examples(clips), settings,
                         loss_config_from(config), 8, stage=1, epochs=3,
                         rng=np.random.default_rng(1))
        return {k: v.data.copy() for k, v in model.named_parameters().items()}

    # accumulate_step=1 must equal a manual loop stepping after every batch
    config = tiny_config(accumulate_step=1, mini_batch_size=2)
    model = build(config, clips)
    loss_cfg = loss_config_from(config)
    opt = Adam(model.param_groups())
    examples = flatten_examples(clips)
    rng = np.random.default_rng(1)
    from etecap.optim import clip_gradients
    for _ in range(3):
        order = rng.permutation(len(examples)) if config["train"]["shuffle"] \
            else np.arange(len(examples))
        for s in range(0, 4, 2):
            opt.zero_grad()
            total, _, _ = batch_loss(model, [examples[i] for i in order[s:s + 2]],
                                     loss_cfg, 8)
            T.backward(total)
            clip_gradients(opt.all_params())
            opt.step()
    manual = {k: v.data.copy() for k, v in model.named_parameters().items()}

    auto = run(1)
    for name in manual:
        assert np.array_equal(manual[name], auto[name]), name


def test_leftover_minibatches_carry_across_epochs():
    # 3 mini-batches per epoch, accumulate_step 2: updates at batches 2, 4, 6
    config = tiny_config(mini_batch_size=2, accumulate_step=2)
    clips = feature_clips(6)
    model = build(config, clips)
    settings = TrainSettings.from_config(config)
    opt = Adam(model.param_groups())
    log = accumulate_train(model, opt, flatten_examples(clips), settings,
                           loss_config_from(config), 8, stage=1, epochs=2)
    assert len(log.records) == 3
    # a fresh third epoch through the same state would complete the pending window
    state_runs = TrainState()
    log2 = accumulate_train(model, opt, flatten_examples(clips), settings,
                            loss_config_from(config), 8, stage=1, epochs=1,
                            state=state_runs)
    assert state_runs.batch_count == 3
    assert len(log2.records) == 1


def test_training_is_deterministic():
    def run():
        config = tiny_config()
        clips = feature_clips(6)
        model = build(config, clips)
        splits = {"train": clips[:4], "val": clips[4:]}
        two_stage_run(model, splits, config)
        return {k: v.data.copy() for k, v in model.named_parameters().items()}

    first, second = run(), run()
    for name in first:
        assert np.array_equal(first[name], second[name]), name


def test_dataset_smaller_than_minibatch_rejected():
    config = tiny_config(mini_batch_size=64)
    clips = feature_clips(4)
    model = build(config, clips)
    settings = TrainSettings.from_config(config)
    opt = Adam(model.param_groups())
    with pytest.raises(ContractError):
        accumulate_train(model, opt, flatten_examples(clips), settings,
                         loss_config_from(config), 8, stage=1, epochs=1)


def test_stage1_freezes_encoder_bit_identical():
    config = tiny_config(backend="tiny_conv")
    clips = frame_clips(4)
    model = build(config, clips)
    before = {k: v.data.copy() for k, v in model.encoder.named_parameters().items()}
    splits = {"train": clips, "val": clips}
    two_stage_run(model, splits, config, stages=(1,))
    after = model.encoder.named_parameters()
    for name in before:
        assert np.array_equal(before[name], after[name].data), name


def test_stage2_first_conv_layer_gets_gradient():
    config = tiny_config(backend="tiny_conv")
    clips = frame_clips(4)
    model = build(config, clips)
    model.set_encoder_trainable(True)
    settings = TrainSettings.from_config(config)
    opt = Adam(model.param_groups())
    log = accumulate_train(model, opt, flatten_examples(clips), settings,
                           loss_config_from(config), 8, stage=2, epochs=1)
    assert log.records
    assert all(rec["grad_norm_encoder"] > 0 for rec in log.records)


def test_two_stage_summary_and_log_fields():
    config = tiny_config(backend="tiny_conv")
    clips = frame_clips(6)
    model = build(config, clips)
    splits = {"train": clips[:4], "val": clips[4:]}
    summary = two_stage_run(model, splits, config)
    assert summary["stage2_val_nll"] <= summary["stage1_val_nll"] + 1e-12
    rec = summary["log"][0]
    assert set(rec) == {"update_idx", "stage", "loss_total", "loss_nll",
                        "loss_adsa", "grad_norm_encoder", "grad_norm_decoder", "lr"}
    assert rec["lr"] == {"encoder": config["train"]["encoder_lr"],
                         "decoder": config["train"]["decoder_lr"]}


def test_evaluate_nll_decreases_with_training():
    config = tiny_config(stage1_max_epochs=10, patience=10)
    config["train"]["decoder_lr"] = 5e-3
    clips = feature_clips(4)
    model = build(config, clips)
    loss_cfg = loss_config_from(config)
    before = evaluate_nll(model, clips, loss_cfg, 8)
    settings = TrainSettings.from_config(config)
    opt = Adam(model.param_groups())
    accumulate_train(model, opt, flatten_examples(clips), settings, loss_cfg, 8,
                     stage=1, epochs=10)
    after = evaluate_nll(model, clips, loss_cfg, 8)
    assert after < before
