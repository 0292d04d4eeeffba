import numpy as np
import pytest

from etecap import tensor as T
from etecap.encoder import (
    EncoderConfig, FeatureFileEncoder, TinyConvEncoder, build_encoder,
    preprocess_frame, read_features, write_features,
)
from etecap.errors import ContractError, IngestionError


def tiny_cfg(**kw):
    base = dict(backend="tiny_conv", d_v=5, num_frames=2, image_size=8,
                channels=(2, 3), kernel=3, stride=2)
    base.update(kw)
    return EncoderConfig(**base)


# ----------------------------------------------------------------- ETEF io

def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(16, 64)).astype(np.float32)
    path = tmp_path / "clip.etef"
    write_features(path, feats)
    back = read_features(path)
    assert back.shape == (16, 64)
    assert np.allclose(back, feats, atol=1e-7)
    # header layout: magic, version, n, d_v
    blob = path.read_bytes()
    assert blob[:4] == b"ETEF"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 16
    assert int.from_bytes(blob[12:16], "little") == 64


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "bad.etef"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(IngestionError):
        read_features(path)


def test_feature_file_backend_passthrough():
    cfg = EncoderConfig(backend="feature_file", d_v=64, num_frames=16, trainable=False)
    enc = FeatureFileEncoder(cfg)
    feats = np.random.default_rng(1).normal(size=(16, 64))
    V = enc.encode(feats, clip_id="c1")
    assert np.array_equal(V.data, feats)
    assert not V.requires_grad


def test_feature_file_backend_dim_mismatch_names_id():
    cfg = EncoderConfig(backend="feature_file", d_v=64, num_frames=16, trainable=False)
    enc = FeatureFileEncoder(cfg)
    with pytest.raises(IngestionError) as err:
        enc.encode(np.zeros((15, 64)), clip_id="clip-07")
    assert "clip-07" in str(err.value)


def test_feature_file_trainable_rejected():
    with pytest.raises(ContractError):
        EncoderConfig(backend="feature_file", trainable=True)


# -------------------------------------------------------------- preprocess

def test_preprocess_center_crop_offsets():
    raw = np.zeros((314, 314, 3))
    raw[7:306, 7:306, :] = 1.0  # exactly the expected crop window
    out = preprocess_frame(raw, resize=314, crop=299)
    assert out.shape == (299, 299, 3)
    assert np.all(out == 1.0)  # (1 - 0.5) / 0.5


def test_preprocess_normalization_values():
    frame = np.full((8, 8, 3), 0.5)
    assert np.all(preprocess_frame(frame) == 0.0)
    frame = np.full((8, 8, 3), 1.0)
    assert np.all(preprocess_frame(frame) == 1.0)


def test_preprocess_rejects_bad_shape():
    with pytest.raises(IngestionError):
        preprocess_frame(np.zeros((8, 8)))


def test_preprocess_resize_shorter_side():
    raw = np.random.default_rng(2).uniform(size=(20, 40, 3))
    out = preprocess_frame(raw, resize=10, crop=10)
    assert out.shape == (10, 10, 3)


# --------------------------------------------------------------- tiny conv

def scalar_conv_stack(frame, params, cfg):
    """Independent per-pixel reimplementation of the tiny conv forward."""
    h, w, _ = frame.shape
    chans = [frame[:, :, i] for i in range(3)]
    if cfg.aux_channels:
        ys = np.linspace(-1.0, 1.0, h)
        xs = np.linspace(-1.0, 1.0, w)
        lum = [[(frame[i][j][0] + frame[i][j][1] + frame[i][j][2]) / 3.0
                for j in range(w)] for i in range(h)]
        chans.append(np.array(lum))
        chans.append(np.array([[xs[j] for j in range(w)] for _ in range(h)]))
        chans.append(np.array([[ys[i] for _ in range(w)] for i in range(h)]))
    x = chans

    def conv(inputs, weights, biases, stride):
        c_out, c_in, k, _ = weights.shape
        hh = (len(inputs[0]) - k) // stride + 1
        ww = (len(inputs[0][0]) - k) // stride + 1
        out = []
        for co in range(c_out):
            plane = [[0.0] * ww for _ in range(hh)]
            for i in range(hh):
                for j in range(ww):
                    acc = biases[co]
                    for ci in range(c_in):
                        for a in range(k):
                            for b in range(k):
                                acc += weights[co][ci][a][b] * \
                                    inputs[ci][i * stride + a][j * stride + b]
                    plane[i][j] = max(acc, 0.0)
            out.append(plane)
        return out

    x = conv(x, params["conv1_w"].data, params["conv1_b"].data, cfg.stride)
    x = conv(x, params["conv2_w"].data, params["conv2_b"].data, cfg.stride)
    pooled = [sum(sum(row) for row in plane) / (len(plane) * len(plane[0]))
              for plane in x]
    return params["proj_w"].data @ np.array(pooled) + params["proj_b"].data


def test_tiny_conv_seeded_frame_matches_scalar_oracle():
    cfg = tiny_cfg()
    enc = TinyConvEncoder(cfg, rng=np.random.default_rng(7))
    frame = np.random.default_rng(8).uniform(size=(8, 8, 3))
    got = enc.frame_forward(frame).data
    want = scalar_conv_stack(frame, enc.params, cfg)
    assert np.allclose(got, want, atol=1e-10)


def test_tiny_conv_all_zero_params_zero_output():
    cfg = tiny_cfg()
    enc = TinyConvEncoder(cfg, rng=np.random.default_rng(7))
    for p in enc.params.values():
        p.data[...] = 0.0
    out = enc.frame_forward(np.random.default_rng(9).uniform(size=(8, 8, 3)))
    assert np.array_equal(out.data, np.zeros(5))


def test_tiny_conv_zero_frame_zero_blocks_gives_activation_of_zero():
    # zero conv blocks (weights incl. coordinate channels, biases) and a zero
    # final bias: a black frame maps to relu(0) pooled = 0, projected to zeros
    cfg = tiny_cfg()
    enc = TinyConvEncoder(cfg, rng=np.random.default_rng(7))
    for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "proj_b"):
        enc.params[name].data[...] = 0.0
    out = enc.frame_forward(np.zeros((8, 8, 3)))
    assert np.array_equal(out.data, np.zeros(5))


def test_tiny_conv_constant_frame_pooling_identity():
    # identity-like kernels on a constant frame: the pre-pool maps are
    # spatially constant, so the pooled vector equals any single position
    cfg = tiny_cfg(aux_channels=False, channels=(3, 3))
    enc = TinyConvEncoder(cfg, rng=np.random.default_rng(7))
    for name in ("conv1_w", "conv2_w"):
        w = enc.params[name]
        w.data[...] = 0.0
        for c in range(w.shape[0]):
            w.data[c, c, 1, 1] = 1.0   # pass channel c through unchanged
    enc.params["conv1_b"].data[...] = 0.0
    enc.params["conv2_b"].data[...] = 0.0
    frame = np.full((9, 9, 3), 0.7)
    frame[:, :, 1] = 0.2
    feat = T.relu(T.conv2d(
        T.Tensor(np.stack([frame[:, :, i] for i in range(3)], axis=0)),
        enc.params["conv1_w"], enc.params["conv1_b"], stride=cfg.stride))
    assert np.allclose(feat.data, feat.data[:, :1, :1])  # spatially constant
    out = enc.frame_forward(frame).data
    single = enc.params["proj_w"].data @ feat.data[:, 0, 0] + enc.params["proj_b"].data
    # one more identity conv + relu leaves the constant maps unchanged
    assert np.allclose(out, single, atol=1e-12)


def test_tiny_conv_rejects_small_frames():
    enc = TinyConvEncoder(tiny_cfg(), rng=np.random.default_rng(7))
    with pytest.raises(ContractError):
        enc.frame_forward(np.zeros((4, 4, 3)))


def test_tiny_conv_gradcheck_through_stack():
    cfg = tiny_cfg()
    enc = TinyConvEncoder(cfg, rng=np.random.default_rng(11))
    frame = np.random.default_rng(12).uniform(size=(8, 8, 3))
    probe = np.random.default_rng(13).normal(size=5)

    def loss(_):
        return T.tensor_sum(T.mul(enc.frame_forward(frame), T.Tensor(probe)))

    for name, p in enc.params.items():
        err = T.finite_difference_check(loss, p)
        assert err < 1e-4, f"{name}: {err}"


def test_encode_shape_and_determinism():
    cfg = tiny_cfg()
    enc = TinyConvEncoder(cfg, rng=np.random.default_rng(3))
    frames = list(np.random.default_rng(4).uniform(size=(2, 8, 8, 3)))
    v1 = enc.encode(frames, clip_id="c")
    v2 = enc.encode(frames, clip_id="c")
    assert v1.shape == (2, 5)
    assert np.array_equal(v1.data, v2.data)


def test_encode_wrong_frame_count():
    enc = TinyConvEncoder(tiny_cfg(), rng=np.random.default_rng(3))
    with pytest.raises(IngestionError) as err:
        enc.encode([np.zeros((8, 8, 3))], clip_id="short-clip")
    assert "short-clip" in str(err.value)


def test_frozen_encoder_returns_leaf():
    enc = TinyConvEncoder(tiny_cfg(trainable=False), rng=np.random.default_rng(3))
    frames = list(np.random.default_rng(4).uniform(size=(2, 8, 8, 3)))
    V = enc.encode(frames)
    assert not V.requires_grad
    assert V._parents == ()


def test_trainable_encoder_first_layer_gets_gradient():
    enc = TinyConvEncoder(tiny_cfg(), rng=np.random.default_rng(3))
    frames = list(np.random.default_rng(4).uniform(size=(2, 8, 8, 3)))
    V = enc.encode(frames)
    T.backward(T.tensor_sum(T.mul(V, V)))
    g = enc.params["conv1_w"].grad
    assert g is not None and np.linalg.norm(g) > 0


def test_build_encoder_dispatch():
    assert isinstance(build_encoder(tiny_cfg()), TinyConvEncoder)
    assert isinstance(
        build_encoder(EncoderConfig(backend="feature_file", trainable=False)),
        FeatureFileEncoder)
