"""Clip encoders: a frozen feature-file backend and a tiny trainable conv net.

The feature-file backend reads stored per-frame vectors verbatim (the "ETEF"
binary format below) and always produces graph leaves.  The tiny_conv
backend is a small trainable stack standing in for an ImageNet-scale CNN:
three constant auxiliary channels are appended to the RGB frame (luminance
plus x/y coordinate ramps; global average pooling would otherwise erase
object position, and luminance keeps the position responses
color-independent), then 2-3 conv+relu blocks, global average pooling and a
linear projection to the feature width.

ETEF feature file (little-endian):
    magic "ETEF" | u32 version=1 | u32 n | u32 d_v | n*d_v float32 row-major
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, IngestionError

ETEF_MAGIC = b"ETEF"
ETEF_VERSION = 1


def write_features(path, features):
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ContractError(f"features must be 2-D, got {features.shape}")
    n, d_v = features.shape
    with open(path, "wb") as fh:
        fh.write(ETEF_MAGIC)
        fh.write(struct.pack("<III", ETEF_VERSION, n, d_v))
        fh.write(features.astype("<f4").tobytes(order="C"))


def read_features(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ETEF_MAGIC:
            raise IngestionError(f"{path}: bad magic {magic!r}")
        version, n, d_v = struct.unpack("<III", fh.read(12))
        if version != ETEF_VERSION:
            raise IngestionError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * n * d_v)
        if len(payload) != 4 * n * d_v:
            raise IngestionError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(n, d_v).astype(np.float64)


@dataclass
class EncoderConfig:
    backend: str = "tiny_conv"        # or "feature_file"
    d_v: int = 64
    num_frames: int = 16
    trainable: bool = True
    image_size: int = 32
    channels: tuple = (24, 48)
    kernel: int = 3
    stride: int = 2
    aux_channels: bool = True         # append luminance + coordinate ramps
    init: str = "engineered"          # or "random"
    # reserved for batchnorm-bearing encoders; tiny_conv carries no
    # batchnorm by default, so this is a no-op unless such a backend exists
    batchnorm_frozen: bool = True

    def __post_init__(self):
        if self.backend not in ("tiny_conv", "feature_file"):
            raise ContractError(f"unknown encoder backend {self.backend!r}")
        if self.backend == "feature_file" and self.trainable:
            raise ContractError("feature_file backend implies trainable = false")
        if not 2 <= len(self.channels) <= 3:
            raise ContractError("tiny_conv uses 2 or 3 conv blocks")
        if self.init not in ("engineered", "random"):
            raise ContractError(f"unknown encoder init {self.init!r}")


def preprocess_frame(raw, resize=None, crop=None):
    """Resize the shorter side, center-crop, normalize with mean/std 0.5.

    ``raw`` is an HxWx3 array in [0, 1] (or uint8 0..255).  The paper-scale
    path uses resize=314, crop=299; the desk-scale path uses the configured
    image size for both.
    """
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise IngestionError(f"frame must be HxWx3, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    h, w = arr.shape[:2]
    if resize is not None and (h, w) != (resize, resize) and min(h, w) != resize:
        from PIL import Image
        scale = resize / min(h, w)
        new_w, new_h = max(resize, round(w * scale)), max(resize, round(h * scale))
        img = Image.fromarray(np.clip(arr * 255.0, 0, 255).astype(np.uint8))
        arr = np.asarray(img.resize((new_w, new_h), Image.BILINEAR)).astype(np.float64) / 255.0
        h, w = arr.shape[:2]
    if crop is not None:
        if h < crop or w < crop:
            raise IngestionError(f"frame {h}x{w} smaller than crop {crop}")
        top, left = (h - crop) // 2, (w - crop) // 2
        arr = arr[top:top + crop, left:left + crop]
    return (arr - 0.5) / 0.5


def _coord_grids(h, w):
    ys = np.linspace(-1.0, 1.0, h)[:, None].repeat(w, axis=1)
    xs = np.linspace(-1.0, 1.0, w)[None, :].repeat(h, axis=0)
    return xs, ys


def _engineered_first_block(c1, c_in, k, rng):
    """Filter-bank initialization standing in for a pretrained first layer.

    The bank holds color-pass kernels, oriented luminance edge detectors
    (both signs, so relu keeps each polarity) and, when the coordinate
    channels are present, "kink" units that respond to the object mask
    shifted by a coordinate ramp, which makes object position survive
    global average pooling.  Channels beyond the bank get random kernels;
    everything remains trainable.
    """
    weights = np.zeros((c1, c_in, k, k))
    biases = np.zeros(c1)
    mid = k // 2
    bank = []

    # color mass: relu(channel + 1) is 0 on the -1 background
    for ch in range(3):
        w = np.zeros((c_in, k, k))
        w[ch, mid, mid] = 1.0
        bank.append((w, 1.0))

    sobel_x = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    sobel_y = sobel_x.T
    diag_1 = np.array([[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]])
    diag_2 = np.fliplr(diag_1)
    if k >= 3:
        for base in (sobel_x, sobel_y, diag_1, diag_2):
            for sign in (1.0, -1.0):
                w = np.zeros((c_in, k, k))
                for ch in range(3):   # luminance built from the rgb channels
                    w[ch, :k, :k] += sign * 0.5 * base[:k, :k] / 3.0
                bank.append((w, 0.0))

    if c_in >= 6:
        # relu(2*lum + a*x + b*y + bias): dead on background, position-graded
        # on the object mask
        for a, b in ((0.75, 0.0), (-0.75, 0.0), (0.0, 0.75), (0.0, -0.75)):
            for bias in (-0.2, 0.2, 0.6):
                w = np.zeros((c_in, k, k))
                w[3, mid, mid] = 2.0
                w[4, mid, mid] = a
                w[5, mid, mid] = b
                bank.append((w, bias))
        w = np.zeros((c_in, k, k))
        w[3, mid, mid] = 1.0
        bank.append((w, 1.0))       # plain luminance mass

    r = 1.0 / np.sqrt(c_in * k * k)
    for i in range(c1):
        if i < len(bank):
            weights[i], biases[i] = bank[i]
        else:
            weights[i] = rng.uniform(-r, r, size=(c_in, k, k))
            biases[i] = rng.uniform(-0.5, 0.5)
    return weights, biases


class TinyConvEncoder:
    """2-3 conv+relu blocks, global average pool, linear projection to d_v."""

    def __init__(self, cfg, rng=None):
        if cfg.backend != "tiny_conv":
            raise ContractError("TinyConvEncoder needs a tiny_conv config")
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        c_in = 3 + (3 if cfg.aux_channels else 0)
        k = cfg.kernel

        def weight(*shape):
            fan_in = int(np.prod(shape[1:]))
            r = 1.0 / np.sqrt(fan_in)
            return T.Tensor(rng.uniform(-r, r, size=shape), requires_grad=True)

        self.params = {}
        prev = c_in
        for i, c_out in enumerate(cfg.channels, start=1):
            if i == 1 and cfg.init == "engineered":
                w0, b0 = _engineered_first_block(c_out, c_in, k, rng)
                self.params["conv1_w"] = T.Tensor(w0, requires_grad=True)
                self.params["conv1_b"] = T.Tensor(b0, requires_grad=True)
            else:
                self.params[f"conv{i}_w"] = weight(c_out, prev, k, k)
                # first block: spread relu kinks across the frame (with
                # average pooling, object position reaches the pooled
                # features mainly through these kinks); deeper blocks:
                # positive biases so no layer starts fully dead
                lo, hi = (-0.5, 0.5) if i == 1 else (0.05, 0.5)
                self.params[f"conv{i}_b"] = T.Tensor(
                    rng.uniform(lo, hi, size=c_out), requires_grad=True)
            prev = c_out
        self.params["proj_w"] = weight(cfg.d_v, prev)
        self.params["proj_b"] = T.Tensor(np.zeros(cfg.d_v), requires_grad=True)
        self.n_blocks = len(cfg.channels)
        self.trainable = cfg.trainable
        self.set_trainable(cfg.trainable)

    def named_parameters(self):
        return dict(self.params)

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        for p in self.params.values():
            p.requires_grad = bool(flag)

    def frame_forward(self, frame):
        """Map one preprocessed HxWx3 frame to a d_v feature vector."""
        frame = np.asarray(frame, dtype=float)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise IngestionError(f"frame must be HxWx3, got {frame.shape}")
        h, w = frame.shape[:2]
        if h < 8 or w < 8:
            raise ContractError(f"frame {h}x{w} smaller than the receptive field")
        chans = [frame[:, :, i] for i in range(3)]
        if self.cfg.aux_channels:
            xs, ys = _coord_grids(h, w)
            chans += [frame.mean(axis=2), xs, ys]
        feat = T.Tensor(np.stack(chans, axis=0))
        for i in range(1, self.n_blocks + 1):
            feat = T.relu(T.conv2d(feat, self.params[f"conv{i}_w"],
                                   self.params[f"conv{i}_b"],
                                   stride=self.cfg.stride))
        c, fh, fw = feat.shape
        pooled = T.mul(T.tensor_sum(T.reshape(feat, (c, fh * fw)), axis=-1),
                       1.0 / (fh * fw))
        return T.add(T.matmul(self.params["proj_w"], pooled), self.params["proj_b"])

    def encode(self, frames, clip_id="<clip>"):
        """Stack per-frame features into the (n, d_v) matrix the decoder reads.

        Trainable encoders leave V attached to the graph so the captioning
        loss gradient reaches the first conv layer; frozen ones return a
        constant leaf.
        """
        if len(frames) != self.cfg.num_frames:
            raise IngestionError(
                f"clip {clip_id}: {len(frames)} frames, expected {self.cfg.num_frames}")
        if self.trainable:
            return T.stack([self.frame_forward(f) for f in frames])
        with T.no_grad():
            return T.stack([self.frame_forward(f) for f in frames])


class FeatureFileEncoder:
    """Pass stored per-frame feature vectors through verbatim (always frozen)."""

    def __init__(self, cfg):
        if cfg.backend != "feature_file":
            raise ContractError("FeatureFileEncoder needs a feature_file config")
        self.cfg = cfg
        self.trainable = False

    def named_parameters(self):
        return {}

    def set_trainable(self, flag):
        if flag:
            raise ContractError("feature_file backend cannot be made trainable")

    def encode(self, features, clip_id="<clip>"):
        arr = np.asarray(features, dtype=float)
        if arr.shape != (self.cfg.num_frames, self.cfg.d_v):
            raise IngestionError(
                f"clip {clip_id}: feature shape {arr.shape}, expected "
                f"({self.cfg.num_frames}, {self.cfg.d_v})")
        return T.Tensor(arr)


def build_encoder(cfg, rng=None):
    if cfg.backend == "tiny_conv":
        return TinyConvEncoder(cfg, rng=rng)
    return FeatureFileEncoder(cfg)
