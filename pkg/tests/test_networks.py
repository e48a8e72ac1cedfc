"""Network shapes, weight sharing, initialization, and output contracts."""

import numpy as np
import pytest

from cycleid.networks import (
    NetConfig,
    decode,
    discriminate,
    encode,
    init_networks,
)
from cycleid.tensor import Tensor

CFG = NetConfig(base_channels=8, d_id=32, d_z=8, lc_hidden=16,
                n_identity_classes=5)


def _nets(seed=0, cfg=CFG):
    return init_networks(cfg, seed)


def _images(batch, cfg=CFG, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, (batch, cfg.channels, cfg.side,
                                      cfg.side)).astype(np.float32))


def test_encoder_output_shapes():
    gen, _, _ = _nets()
    idc, pose = encode(gen, _images(3))
    assert idc.data.shape == (3, CFG.d_id)
    assert pose.data.shape == (3, CFG.d_pose)


def test_decoder_output_shape_and_range():
    gen, _, _ = _nets()
    rng = np.random.default_rng(1)
    idc = Tensor(rng.standard_normal((3, CFG.d_id)).astype(np.float32))
    p = Tensor(np.tile([1.0, 0.0], (3, 1)).astype(np.float32))
    z = Tensor(rng.standard_normal((3, CFG.d_z)).astype(np.float32))
    out = decode(gen, idc, p, z)
    assert out.data.shape == (3, CFG.channels, CFG.side, CFG.side)
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_discriminator_head_shapes():
    _, _, disc = _nets()
    out = discriminate(disc, _images(4))
    assert out.realness_logit.data.shape == (4,)
    assert out.pose_logits.data.shape == (4, 2)
    assert out.identity_logits.data.shape == (4, CFG.n_identity_classes + 1)
    assert disc.fake_class == CFG.n_identity_classes


def test_latent_classifier_shapes_both_variants():
    for hidden in (16, 0):
        cfg = NetConfig(base_channels=8, d_id=32, lc_hidden=hidden)
        _, lc, _ = init_networks(cfg, 0)
        logits = lc(Tensor(np.zeros((5, 32), dtype=np.float32)))
        assert logits.data.shape == (5,)
        if hidden == 0:
            assert lc.fc1 is None


def test_secondary_handles_alias_primary_storage():
    gen, _, _ = _nets()
    assert gen.encoder_a is gen.encoder_b
    assert gen.decoder_a is gen.decoder_b
    # mutating through one handle is visible through the other, bit for bit
    w = gen.encoder_a.head.w
    w.data[0, 0] += 1.0
    assert gen.encoder_b.head.w.data[0, 0] == w.data[0, 0]


def test_shared_trunk_perturbation_changes_both_paths():
    gen, _, _ = _nets()
    x = _images(2)
    idc0, _ = encode(gen, x, training=False)
    rng = np.random.default_rng(2)
    idc = Tensor(rng.standard_normal((2, CFG.d_id)).astype(np.float32))
    p = Tensor(np.tile([0.0, 1.0], (2, 1)).astype(np.float32))
    z = Tensor(np.zeros((2, CFG.d_z), dtype=np.float32))
    dec0 = decode(gen, idc, p, z, training=False)
    gen.encoder.head.w.data += 0.5
    idc1, _ = encode(gen, x, training=False)
    assert not np.array_equal(idc0.data, idc1.data)
    gen.decoder.head.w.data += 0.5
    dec1 = decode(gen, idc, p, z, training=False)
    assert not np.array_equal(dec0.data, dec1.data)


def test_decoder_uses_noise_input():
    gen, _, _ = _nets()
    rng = np.random.default_rng(3)
    idc = Tensor(rng.standard_normal((2, CFG.d_id)).astype(np.float32))
    p = Tensor(np.tile([1.0, 0.0], (2, 1)).astype(np.float32))
    z1 = Tensor(rng.standard_normal((2, CFG.d_z)).astype(np.float32))
    z2 = Tensor(rng.standard_normal((2, CFG.d_z)).astype(np.float32))
    a = decode(gen, idc, p, z1, training=False)
    b = decode(gen, idc, p, z2, training=False)
    assert not np.array_equal(a.data, b.data)


def test_init_deterministic_and_distinct_across_seeds():
    g1, _, _ = _nets(7)
    g2, _, _ = _nets(7)
    g3, _, _ = _nets(8)
    for k, p in g1.named_params().items():
        np.testing.assert_array_equal(p.data, g2.named_params()[k].data)
    assert any(not np.array_equal(p.data, g3.named_params()[k].data)
               for k, p in g1.named_params().items())


def test_init_statistics():
    gen, _, _ = _nets(0)
    params = gen.named_params()
    # biases and batch-norm shifts start at zero
    for name, p in params.items():
        if name.endswith(".b") or name.endswith(".beta"):
            assert not p.data.any(), name
    # weights are near-zero-mean with std around 0.02
    w = params["enc.conv1.w"].data
    assert abs(float(w.mean())) < 0.01
    assert 0.01 < float(w.std()) < 0.03
    g = params["enc.bn2.gamma"].data
    assert 0.9 < float(g.mean()) < 1.1


def test_param_and_buffer_names_unique_and_disjoint():
    gen, lc, disc = _nets()
    names = (list(gen.named_params()) + list(lc.named_params())
             + list(disc.named_params()))
    assert len(names) == len(set(names))
    bufs = list(gen.named_buffers()) + list(disc.named_buffers())
    assert not (set(names) & set(bufs))


def test_encoder_rejects_wrong_image_shape():
    gen, _, _ = _nets()
    with pytest.raises(ValueError, match="image batch"):
        encode(gen, Tensor(np.zeros((2, 1, 40, 40), dtype=np.float32)))


def test_decoder_rejects_wrong_code_widths():
    gen, _, _ = _nets()
    good_p = Tensor(np.zeros((2, CFG.d_pose), dtype=np.float32))
    good_z = Tensor(np.zeros((2, CFG.d_z), dtype=np.float32))
    with pytest.raises(ValueError, match="identity code"):
        decode(gen, Tensor(np.zeros((2, CFG.d_id + 1), dtype=np.float32)),
               good_p, good_z)
    with pytest.raises(ValueError, match="noise"):
        decode(gen, Tensor(np.zeros((2, CFG.d_id), dtype=np.float32)),
               good_p, Tensor(np.zeros((2, CFG.d_z + 2), dtype=np.float32)))


def test_unsupported_input_side_raises():
    with pytest.raises(ValueError, match="conv chain"):
        init_networks(NetConfig(side=37, base_channels=8), 0)
