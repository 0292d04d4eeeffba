"""Command-line entry point: train, caption, score, gen-data, check-grads.

Exit codes: 0 success, 2 invalid configuration (field-level message),
3 checkpoint/config mismatch, 4 candidate/reference id mismatch.
The ETECAP_SEED environment variable overrides the configured seed.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .config import dump_config, load_config
from .beam import beam_search
from .data import SynthSpec, generate_synthetic, load_manifest, split_clips
from .decoder import SALSTMDecoder
from .encoder import EncoderConfig, TinyConvEncoder
from .errors import ConfigError, EtecapError, IngestionError
from .losses import LossConfig, caption_losses
from .metrics import ScoredCorpus, score_corpus
from .model import CaptionModel
from .text import Vocabulary, tokenize
from .training import two_stage_run


def _load_validated_config(args):
    return load_config(
        path=getattr(args, "config", None),
        overrides=getattr(args, "set", None) or [],
        seed_env=os.environ.get("ETECAP_SEED"),
    )


def cmd_train(args):
    try:
        config = _load_validated_config(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    if args.out_dir:
        config["out_dir"] = args.out_dir
    if config["manifest"] is None:
        print("invalid config: manifest: a dataset manifest is required",
              file=sys.stderr)
        return 2

    clips = load_manifest(
        config["manifest"],
        expected_frames=(config["encoder"]["num_frames"]
                         if config["encoder"]["backend"] == "feature_file" else None),
        expected_dim=(config["encoder"]["d_v"]
                      if config["encoder"]["backend"] == "feature_file" else None),
    )
    splits = split_clips(clips)
    if not splits["train"]:
        print("invalid config: manifest: no training clips", file=sys.stderr)
        return 2

    if args.resume:
        try:
            header, tensors = load_checkpoint(args.resume)
            vocab = Vocabulary(header["vocab"])
            model = CaptionModel(config, vocab)
            model.load_tensors(tensors, args.resume)
        except IngestionError as exc:
            print(f"checkpoint mismatch: {exc}", file=sys.stderr)
            return 3
    else:
        vocab = Vocabulary.build(
            [toks for clip in splits["train"] for toks in clip.tokens],
            min_count=config["text"]["min_count"])
        model = CaptionModel(config, vocab)

    os.makedirs(config["out_dir"], exist_ok=True)
    dump_config(config, os.path.join(config["out_dir"], "config.json"))
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    summary = two_stage_run(model, splits, config, out_dir=config["out_dir"],
                            stages=stages)
    for key in ("stage1_val_nll", "stage2_val_nll"):
        if key in summary:
            print(f"{key}: {summary[key]:.6f}")
    print(f"updates: {len(summary['log'])}")
    return 0


def cmd_caption(args):
    try:
        model, header = CaptionModel.load(args.checkpoint)
    except IngestionError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return 3
    config = header["config"]
    beam_size = args.beam if args.beam is not None else config["beam"]["size"]
    max_len = args.max_len if args.max_len is not None else config["beam"]["max_len"]

    clips = load_manifest(args.manifest)
    if args.split:
        clips = [c for c in clips if c.split == args.split]
    lines = []
    for clip in clips:
        with T.no_grad():
            V = model.encode_clip(clip)
        hyps = beam_search(model.decoder, V, beam_size=beam_size, max_len=max_len)
        best = hyps[0]
        lines.append(json.dumps(
            {"id": clip.id, "caption": model.vocab.decode(best.tokens),
             "score": best.score},
            sort_keys=True))
    output = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(output)
    sys.stdout.write(output)
    return 0


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_score(args):
    candidates = {rec["id"]: tokenize(rec["caption"]) for rec in _read_jsonl(args.candidates)}
    references = {rec["id"]: [tokenize(c) for c in rec["captions"]]
                  for rec in _read_jsonl(args.references)}
    unmatched = sorted(set(candidates).symmetric_difference(references))
    if unmatched:
        print(f"id mismatch between candidates and references: {unmatched}",
              file=sys.stderr)
        return 4
    report = score_corpus(ScoredCorpus(candidates, references))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def cmd_gen_data(args):
    split_sizes = tuple(int(x) for x in args.splits.split(","))
    spec = SynthSpec(image_size=args.image_size, num_frames=args.num_frames,
                     seed=args.seed, split_sizes=split_sizes,
                     clips_per_combo=args.clips_per_combo,
                     trail=args.trail, trail_cap=args.trail_cap)
    manifest = generate_synthetic(spec, args.out)
    print(manifest)
    return 0


def cmd_check_grads(args):
    """Finite-difference suite over a small decoder and the conv encoder."""
    rng = np.random.default_rng(args.seed)
    dec = SALSTMDecoder(12, 5, d_h=8, d_e=6, d_a=8, rng=rng)
    V = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    targets = [int(t) for t in rng.integers(4, 12, size=2)] + [2]

    def decoder_loss(_):
        probs, alphas = dec.teacher_forced_rollout(V, targets)
        total, _, _ = caption_losses([probs], [targets], [alphas], LossConfig())
        return total

    # eps=1e-3 keeps the per-coordinate perturbation signal above float64
    # evaluation noise for whole-network losses (tiny gradient entries)
    failures = 0
    for name, param in list(dec.named_parameters().items()) + [("V", V)]:
        err = T.finite_difference_check(decoder_loss, param, eps=1e-3)
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"decoder {name:8s} max rel err {err:.3e}  {status}")
        failures += status == "FAIL"

    enc_cfg = EncoderConfig(backend="tiny_conv", d_v=5, num_frames=1,
                            image_size=8, channels=(2, 3), kernel=3, stride=2)
    enc = TinyConvEncoder(enc_cfg, rng=rng)
    frame = rng.uniform(size=(8, 8, 3))
    probe = rng.normal(size=5)

    def encoder_loss(_):
        return T.tensor_sum(T.mul(enc.frame_forward(frame), T.Tensor(probe)))

    for name, param in enc.named_parameters().items():
        err = T.finite_difference_check(encoder_loss, param)
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"encoder {name:8s} max rel err {err:.3e}  {status}")
        failures += status == "FAIL"
    return 0 if failures == 0 else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="etecap",
        description="Desk-scale end-to-end trainable clip captioning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-stage training process")
    p_train.add_argument("--config", help="JSON config file")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config field (dotted path, JSON value)")
    p_train.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--out-dir", help="output directory override")
    p_train.set_defaults(fn=cmd_train)

    p_cap = sub.add_parser("caption", help="generate captions with beam search")
    p_cap.add_argument("--checkpoint", required=True)
    p_cap.add_argument("--manifest", required=True)
    p_cap.add_argument("--beam", type=int, default=None)
    p_cap.add_argument("--max-len", type=int, default=None)
    p_cap.add_argument("--split", default=None, help="restrict to one split")
    p_cap.add_argument("--out", help="also write JSONL here")
    p_cap.set_defaults(fn=cmd_caption)

    p_score = sub.add_parser("score", help="score candidate captions")
    p_score.add_argument("--candidates", required=True, help="JSONL {id, caption}")
    p_score.add_argument("--references", required=True, help="JSONL {id, captions}")
    p_score.add_argument("--out", help="also write the report here")
    p_score.set_defaults(fn=cmd_score)

    p_gen = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--image-size", type=int, default=32)
    p_gen.add_argument("--num-frames", type=int, default=16)
    p_gen.add_argument("--splits", default="28,4,4")
    p_gen.add_argument("--clips-per-combo", type=int, default=1)
    p_gen.add_argument("--trail", type=float, default=0.7)
    p_gen.add_argument("--trail-cap", type=float, default=0.25)
    p_gen.set_defaults(fn=cmd_gen_data)

    p_chk = sub.add_parser("check-grads", help="run the finite-difference suite")
    p_chk.add_argument("--seed", type=int, default=0)
    p_chk.set_defaults(fn=cmd_check_grads)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except EtecapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
