"""Encoder, decoder, latent pose classifier, and three-headed discriminator.

The secondary encoder/decoder are aliases of the primary ones: there is a
single parameter storage, exposed through both handles. Architecture is a
compact DC-GAN-style stack sized for 38x38 inputs: four strided convs down,
four transposed convs up, with the kernel/stride/pad chain chosen so the
decoder output side equals the encoder input side exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAK = 0.2

# (kernel, stride, pad) per downsampling layer; 38 -> 19 -> 9 -> 5 -> 2
CONV_CHAIN = ((4, 2, 1), (3, 2, 0), (3, 2, 1), (3, 2, 0))


@dataclass
class NetConfig:
    side: int = 38
    channels: int = 1
    d_id: int = 256
    d_pose: int = 2
    d_z: int = 16
    base_channels: int = 32
    lc_hidden: int = 64
    n_identity_classes: int = 18  # training identities; discriminator adds a fake class


def _chain_sides(side: int):
    sides = [side]
    for k, s, p in CONV_CHAIN:
        h = sides[-1]
        if (h + 2 * p - k) % s != 0:
            raise ValueError(
                f"side {side} does not divide evenly through the conv chain "
                f"(layer {len(sides)}: size {h})"
            )
        sides.append((h + 2 * p - k) // s + 1)
    return sides


def _channel_plan(base: int, channels: int):
    return [channels, base, 2 * base, 4 * base, 4 * base]


class Linear:
    def __init__(self, nin, nout, rng):
        self.w = Tensor(rng.normal(0.0, 0.02, (nin, nout)).astype(np.float32),
                        requires_grad=True)
        self.b = Tensor(np.zeros(nout, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b

    def params(self):
        return {"w": self.w, "b": self.b}

    def buffers(self):
        return {}


class Conv2d:
    def __init__(self, cin, cout, k, stride, pad, rng):
        self.stride, self.pad = stride, pad
        self.w = Tensor(rng.normal(0.0, 0.02, (cout, cin, k, k)).astype(np.float32),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        return {"w": self.w, "b": self.b}

    def buffers(self):
        return {}


class ConvTranspose2d:
    def __init__(self, cin, cout, k, stride, pad, rng):
        self.stride, self.pad = stride, pad
        self.w = Tensor(rng.normal(0.0, 0.02, (cin, cout, k, k)).astype(np.float32),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return T.conv2d_transpose(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        return {"w": self.w, "b": self.b}

    def buffers(self):
        return {}


class BatchNorm:
    # gamma drawn around 1 (DC-GAN convention); running stats kept for eval
    def __init__(self, num_features, rng):
        self.gamma = Tensor(rng.normal(1.0, 0.02, num_features).astype(np.float32),
                            requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=np.float32),
                           requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=np.float32)
        self.running_var = np.ones(num_features, dtype=np.float32)

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def _collect(prefix, layers, getter):
    out = {}
    for name, layer in layers:
        for k, v in getter(layer).items():
            out[f"{prefix}.{name}.{k}"] = v
    return out


class _ConvTrunk:
    """Shared shape of the encoder and the discriminator trunk:
    four strided convs (leaky relu; batch norm after layers 2-4), flattened."""

    def __init__(self, cfg: NetConfig, rng):
        chans = _channel_plan(cfg.base_channels, cfg.channels)
        self.sides = _chain_sides(cfg.side)
        self.convs = [
            Conv2d(chans[i], chans[i + 1], k, s, p, rng)
            for i, (k, s, p) in enumerate(CONV_CHAIN)
        ]
        self.bns = [BatchNorm(chans[i + 2], rng) for i in range(3)]
        self.out_dim = chans[-1] * self.sides[-1] ** 2
        self.cfg = cfg

    def __call__(self, x, training):
        cfg = self.cfg
        if x.data.ndim != 4 or x.data.shape[1:] != (cfg.channels, cfg.side, cfg.side):
            raise ValueError(
                f"expected image batch (B,{cfg.channels},{cfg.side},{cfg.side}), "
                f"got {x.data.shape}"
            )
        h = T.leaky_relu(self.convs[0](x), LEAK)
        for conv, bn in zip(self.convs[1:], self.bns):
            h = T.leaky_relu(bn(conv(h), training), LEAK)
        return T.reshape(h, (x.data.shape[0], self.out_dim))

    def layers(self):
        pairs = [(f"conv{i+1}", c) for i, c in enumerate(self.convs)]
        pairs += [(f"bn{i+2}", b) for i, b in enumerate(self.bns)]
        return pairs


class Encoder:
    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        self.trunk = _ConvTrunk(cfg, rng)
        self.head = Linear(self.trunk.out_dim, cfg.d_id + cfg.d_pose, rng)

    def __call__(self, x, training=True):
        """Returns (identity_code, pose_code)."""
        h = self.head(self.trunk(x, training))
        idc = T.slice_axis(h, 1, 0, self.cfg.d_id)
        pose = T.slice_axis(h, 1, self.cfg.d_id, self.cfg.d_id + self.cfg.d_pose)
        return idc, pose

    def named_params(self, prefix="enc"):
        out = _collect(prefix, self.trunk.layers() + [("head", self.head)],
                       lambda l: l.params())
        return out

    def named_buffers(self, prefix="enc"):
        return _collect(prefix, self.trunk.layers(), lambda l: l.buffers())


class Decoder:
    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        chans = _channel_plan(cfg.base_channels, cfg.channels)
        sides = _chain_sides(cfg.side)
        self.bottom_side = sides[-1]
        self.bottom_chan = chans[-1]
        self.head = Linear(cfg.d_id + cfg.d_pose + cfg.d_z,
                           self.bottom_chan * self.bottom_side ** 2, rng)
        rev = list(reversed(CONV_CHAIN))
        rev_chans = list(reversed(chans))
        self.deconvs = [
            ConvTranspose2d(rev_chans[i], rev_chans[i + 1], k, s, p, rng)
            for i, (k, s, p) in enumerate(rev)
        ]
        self.bns = [BatchNorm(rev_chans[i + 1], rng) for i in range(3)]

    def __call__(self, identity_code, pose_onehot, z, training=True):
        cfg = self.cfg
        for t, dim, what in ((identity_code, cfg.d_id, "identity code"),
                             (pose_onehot, cfg.d_pose, "pose one-hot"),
                             (z, cfg.d_z, "noise")):
            if t.data.ndim != 2 or t.data.shape[1] != dim:
                raise ValueError(
                    f"decode: {what} must be (B,{dim}), got {t.data.shape}"
                )
        h = T.concat([identity_code, pose_onehot, z], axis=1)
        h = self.head(h)
        h = T.reshape(h, (h.data.shape[0], self.bottom_chan,
                          self.bottom_side, self.bottom_side))
        for deconv, bn in zip(self.deconvs[:-1], self.bns):
            h = T.relu(bn(deconv(h), training))
        return T.tanh(self.deconvs[-1](h))

    def layers(self):
        pairs = [("head", self.head)]
        pairs += [(f"deconv{i+1}", d) for i, d in enumerate(self.deconvs)]
        pairs += [(f"bn{i+1}", b) for i, b in enumerate(self.bns)]
        return pairs

    def named_params(self, prefix="dec"):
        return _collect(prefix, self.layers(), lambda l: l.params())

    def named_buffers(self, prefix="dec"):
        return _collect(prefix, self.layers(), lambda l: l.buffers())


class Generator:
    """One storage for the shared encoder/decoder pair; the primary and
    secondary handles alias it."""

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    # primary / secondary handles: same objects by construction
    @property
    def encoder_a(self):
        return self.encoder

    @property
    def encoder_b(self):
        return self.encoder

    @property
    def decoder_a(self):
        return self.decoder

    @property
    def decoder_b(self):
        return self.decoder

    def named_params(self):
        out = self.encoder.named_params("enc")
        out.update(self.decoder.named_params("dec"))
        return out

    def named_buffers(self):
        out = self.encoder.named_buffers("enc")
        out.update(self.decoder.named_buffers("dec"))
        return out


class LatentClassifier:
    """Small binary pose classifier over the identity code.

    With lc_hidden == 0 it is purely linear: fooling it then removes the
    linear pose direction from the code, which is exactly what the
    post-hoc logistic leakage probe measures."""

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        if cfg.lc_hidden > 0:
            self.fc1 = Linear(cfg.d_id, cfg.lc_hidden, rng)
            self.fc2 = Linear(cfg.lc_hidden, 1, rng)
        else:
            self.fc1 = None
            self.fc2 = Linear(cfg.d_id, 1, rng)

    def __call__(self, identity_code):
        if identity_code.data.ndim != 2 or identity_code.data.shape[1] != self.cfg.d_id:
            raise ValueError(
                f"latent classifier: expected (B,{self.cfg.d_id}), "
                f"got {identity_code.data.shape}"
            )
        h = identity_code
        if self.fc1 is not None:
            h = T.leaky_relu(self.fc1(h), LEAK)
        logits = self.fc2(h)
        return T.reshape(logits, (identity_code.data.shape[0],))

    def named_params(self):
        layers = [("fc2", self.fc2)]
        if self.fc1 is not None:
            layers.insert(0, ("fc1", self.fc1))
        return _collect("lc", layers, lambda l: l.params())

    def named_buffers(self):
        return {}


@dataclass
class DiscriminatorOutput:
    realness_logit: Tensor  # (B,)
    pose_logits: Tensor  # (B, 2)
    identity_logits: Tensor  # (B, n_identity_classes + 1); last class = fake


class Discriminator:
    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        self.trunk = _ConvTrunk(cfg, rng)
        self.real_head = Linear(self.trunk.out_dim, 1, rng)
        self.pose_head = Linear(self.trunk.out_dim, 2, rng)
        self.id_head = Linear(self.trunk.out_dim, cfg.n_identity_classes + 1, rng)

    @property
    def fake_class(self) -> int:
        return self.cfg.n_identity_classes

    def __call__(self, x, training=True) -> DiscriminatorOutput:
        h = self.trunk(x, training)
        real = T.reshape(self.real_head(h), (x.data.shape[0],))
        return DiscriminatorOutput(real, self.pose_head(h), self.id_head(h))

    def named_params(self):
        layers = self.trunk.layers() + [("real_head", self.real_head),
                                        ("pose_head", self.pose_head),
                                        ("id_head", self.id_head)]
        return _collect("disc", layers, lambda l: l.params())

    def named_buffers(self):
        return _collect("disc", self.trunk.layers(), lambda l: l.buffers())


def init_networks(cfg: NetConfig, seed: int):
    """Fresh (generator, latent classifier, discriminator), deterministic in seed."""
    rng = np.random.default_rng(seed)
    gen = Generator(cfg, rng)
    lc = LatentClassifier(cfg, rng)
    disc = Discriminator(cfg, rng)
    return gen, lc, disc


def encode(gen: Generator, images: Tensor, training=True):
    return gen.encoder_a(images, training)


def decode(gen: Generator, identity_code, pose_onehot, z, training=True):
    return gen.decoder_a(identity_code, pose_onehot, z, training)


def classify_latent(lc: LatentClassifier, identity_code):
    return lc(identity_code)


def discriminate(disc: Discriminator, images, training=True):
    return disc(images, training)
