"""Run configuration: JSON file plus dotted-key overrides, fully validated.

Every knob named by the other modules lives here; the resolved config is
echoed into the output directory before any work starts.
"""

import copy
import json
import math

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/exp",
    "manifest": None,
    "encoder": {
        "backend": "tiny_conv",         # or "feature_file"
        "d_v": 64,
        "num_frames": 16,
        "trainable": True,
        "image_size": 32,
        "channels": [24, 48],
        "kernel": 3,
        "stride": 2,
        "aux_channels": True,
        "init": "engineered",
        "batchnorm_frozen": True,
    },
    "decoder": {
        "d_h": 32,
        "d_e": 24,
        "d_a": None,                    # defaults to d_h
    },
    "text": {
        "min_count": 1,
        "max_caption_len": 30,
    },
    "loss": {
        "lambda": 0.70602,
        "adsa_normalizer": "num_frames",
        "reduction": "mean",
    },
    "train": {
        "mini_batch_size": 8,
        "accumulate_step": 4,
        "clip_low": -10.0,
        "clip_high": 10.0,
        "stage1_max_epochs": 30,
        "stage2_max_epochs": 30,
        "eval_every": 2,
        "patience": 3,
        "encoder_lr": 1e-3,
        "encoder_weight_decay": 4e-5,
        "decoder_lr": 1e-4,
        "decoder_weight_decay": 1e-4,
        "shuffle": True,
    },
    "beam": {
        "size": 5,
        "max_len": 30,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        full = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{full}: unknown configuration field")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, full)
        else:
            out[key] = value
    return out


def apply_overrides(config, overrides):
    """Apply "dotted.key=json_value" strings on top of a config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"{dotted}: unknown configuration field")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{dotted}: unknown configuration field")
        node[parts[-1]] = value
    return config


def _require(cond, field, message):
    if not cond:
        raise ConfigError(f"{field}: {message}")


def validate(config):
    _require(isinstance(config["seed"], int) and config["seed"] >= 0,
             "seed", "must be a non-negative integer")

    enc = config["encoder"]
    _require(enc["backend"] in ("tiny_conv", "feature_file"),
             "encoder.backend", "must be tiny_conv or feature_file")
    _require(enc["d_v"] >= 1, "encoder.d_v", "must be >= 1")
    _require(enc["num_frames"] >= 1, "encoder.num_frames", "must be >= 1")
    if enc["backend"] == "feature_file":
        _require(not enc["trainable"], "encoder.trainable",
                 "feature_file backend implies trainable = false")
    _require(enc["image_size"] >= 8, "encoder.image_size", "must be >= 8")
    _require(len(enc["channels"]) in (2, 3), "encoder.channels",
             "needs 2 or 3 conv blocks")
    _require(enc["kernel"] >= 1, "encoder.kernel", "must be >= 1")
    _require(enc["stride"] >= 1, "encoder.stride", "must be >= 1")
    _require(enc["init"] in ("engineered", "random"), "encoder.init",
             "must be engineered or random")

    dec = config["decoder"]
    for key in ("d_h", "d_e"):
        _require(dec[key] >= 1, f"decoder.{key}", "must be >= 1")
    _require(dec["d_a"] is None or dec["d_a"] >= 1, "decoder.d_a",
             "must be >= 1 (or null for d_h)")

    txt = config["text"]
    _require(txt["min_count"] >= 1, "text.min_count", "must be >= 1")
    _require(txt["max_caption_len"] >= 2, "text.max_caption_len", "must be >= 2")

    loss = config["loss"]
    _require(loss["lambda"] >= 0, "loss.lambda", "must be >= 0")
    _require(loss["adsa_normalizer"] in ("num_frames", "feature_dim"),
             "loss.adsa_normalizer", "must be num_frames or feature_dim")
    _require(loss["reduction"] in ("mean", "sum"),
             "loss.reduction", "must be mean or sum")

    train = config["train"]
    _require(train["mini_batch_size"] >= 1, "train.mini_batch_size", "must be >= 1")
    _require(train["accumulate_step"] >= 1, "train.accumulate_step", "must be >= 1")
    _require(
        math.isfinite(train["clip_low"]) and math.isfinite(train["clip_high"])
        and train["clip_low"] < train["clip_high"],
        "train.clip_low", "clip bounds must be finite with low < high")
    for key in ("stage1_max_epochs", "stage2_max_epochs"):
        _require(train[key] >= 0, f"train.{key}", "must be >= 0")
    _require(train["eval_every"] >= 1, "train.eval_every", "must be >= 1")
    _require(train["patience"] >= 1, "train.patience", "must be >= 1")
    for key in ("encoder_lr", "decoder_lr"):
        _require(train[key] > 0, f"train.{key}", "must be > 0")
    for key in ("encoder_weight_decay", "decoder_weight_decay"):
        _require(train[key] >= 0, f"train.{key}", "must be >= 0")

    beam = config["beam"]
    _require(beam["size"] >= 1, "beam.size", "must be >= 1")
    _require(beam["max_len"] >= 1, "beam.max_len", "must be >= 1")
    return config


def load_config(path=None, overrides=(), seed_env=None):
    """Merge defaults <- file <- overrides <- seed env var, then validate."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        config = _merge(config, file_cfg)
    apply_overrides(config, overrides)
    if seed_env is not None:
        try:
            config["seed"] = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"seed: ETECAP_SEED={seed_env!r} is not an integer") from exc
    return validate(config)


def effective_batch(config):
    return config["train"]["accumulate_step"] * config["train"]["mini_batch_size"]


def dump_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
