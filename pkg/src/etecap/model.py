"""The full captioner: encoder + decoder + vocabulary, with checkpoint io."""

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import sample_frames
from .decoder import SALSTMDecoder
from .encoder import EncoderConfig, build_encoder, preprocess_frame
from .errors import IngestionError
from .optim import ParamGroup
from .text import Vocabulary


def encoder_config_from(config):
    enc = config["encoder"]
    return EncoderConfig(
        backend=enc["backend"],
        d_v=enc["d_v"],
        num_frames=enc["num_frames"],
        trainable=enc["trainable"],
        image_size=enc["image_size"],
        channels=tuple(enc["channels"]),
        kernel=enc["kernel"],
        stride=enc["stride"],
        aux_channels=enc["aux_channels"],
        init=enc["init"],
        batchnorm_frozen=enc["batchnorm_frozen"],
    )


class CaptionModel:
    def __init__(self, config, vocab):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config["seed"])
        self.encoder = build_encoder(encoder_config_from(config), rng=rng)
        dec = config["decoder"]
        self.decoder = SALSTMDecoder(
            vocab_size=len(vocab),
            d_v=config["encoder"]["d_v"],
            d_h=dec["d_h"],
            d_e=dec["d_e"],
            d_a=dec["d_a"],
            rng=rng,
        )
        self._feature_cache = {}

    def named_parameters(self):
        out = {}
        for name, p in self.encoder.named_parameters().items():
            out[f"encoder.{name}"] = p
        for name, p in self.decoder.named_parameters().items():
            out[f"decoder.{name}"] = p
        return out

    def param_groups(self):
        train = self.config["train"]
        return [
            ParamGroup("encoder", self.encoder.named_parameters(),
                       lr=train["encoder_lr"],
                       weight_decay=train["encoder_weight_decay"],
                       frozen=not self.encoder.trainable),
            ParamGroup("decoder", self.decoder.named_parameters(),
                       lr=train["decoder_lr"],
                       weight_decay=train["decoder_weight_decay"]),
        ]

    def set_encoder_trainable(self, flag):
        self.encoder.set_trainable(flag)
        self._feature_cache.clear()

    def encode_clip(self, clip):
        """Clip record -> feature matrix V; frozen encodings are cached by id."""
        frozen = not self.encoder.trainable
        if frozen and clip.id in self._feature_cache:
            return self._feature_cache[clip.id]

        if clip.feature_path is not None:
            V = self.encoder.encode(clip.load_features(), clip_id=clip.id)
        elif clip.frame_dir is not None:
            frames = clip.load_frames()
            if not frames:
                raise IngestionError(f"clip {clip.id}: no frames")
            n = self.config["encoder"]["num_frames"]
            if len(frames) != n:
                frames = [frames[i] for i in sample_frames(len(frames), n)]
            size = self.config["encoder"]["image_size"]
            frames = [preprocess_frame(f, resize=size, crop=size) for f in frames]
            V = self.encoder.encode(frames, clip_id=clip.id)
        else:
            raise IngestionError(f"clip {clip.id}: no features or frames")

        if frozen:
            self._feature_cache[clip.id] = V
        return V

    # ------------------------------------------------------------ persistence

    def save(self, path, stage):
        header = {
            "config": self.config,
            "vocab": self.vocab.tokens[4:],
            "stage": stage,
        }
        save_checkpoint(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path):
        header, tensors = load_checkpoint(path)
        vocab = Vocabulary(header["vocab"])
        model = cls(header["config"], vocab)
        model.load_tensors(tensors, path)
        return model, header

    def load_tensors(self, tensors, path="<checkpoint>"):
        params = self.named_parameters()
        if set(tensors) != set(params):
            missing = set(params).symmetric_difference(tensors)
            raise IngestionError(
                f"{path}: checkpoint/config mismatch, differing tensors {sorted(missing)}")
        for name, values in tensors.items():
            if params[name].data.shape != values.shape:
                raise IngestionError(
                    f"{path}: shape mismatch for {name}: "
                    f"{values.shape} vs {params[name].data.shape}")
            params[name].data[...] = values
        self._feature_cache.clear()
