"""Loss assembly, the alternating update schedule with the discriminator
hold gate, the epoch loop, and binary checkpointing.

Update order within one step: latent classifier on detached codes, then the
shared encoder/decoder, then (gated) the discriminator. The discriminator is
held whenever its rolling real/fake accuracy over the recent window has
reached the hold threshold.
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig, parse_config
from .dataset import DatasetFile, preprocess, split
from .networks import (Discriminator, Generator, LatentClassifier, NetConfig,
                       classify_latent, decode, discriminate, encode,
                       init_networks)
from .optim import Adam
from .tensor import Tensor, no_grad

CKPT_MAGIC = b"PIGC"
CKPT_VERSION = 1

HISTORY_HEADER = "step,epoch,loss_g_adv,loss_cycle,loss_fool,loss_id,loss_lc,loss_d,d_acc,held"


class TrainAbort(RuntimeError):
    """Raised when a loss component goes non-finite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component '{component}': {value}")
        self.component = component


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_cycle: float = 10.0
    w_fool: float = 0.5
    w_id: float = 1.0
    w_pose_d: float = 1.0

    @classmethod
    def from_config(cls, cfg: RunConfig):
        return cls(cfg.w_adv, cfg.w_cycle, cfg.w_fool, cfg.w_id, cfg.w_pose_d)


def pose_onehot(yp, flip: bool = False) -> Tensor:
    yp = np.asarray(yp, dtype=np.int64)
    if flip:
        yp = 1 - yp
    out = np.zeros((yp.shape[0], 2), dtype=np.float32)
    out[np.arange(yp.shape[0]), yp] = 1.0
    return Tensor(out)


def generator_loss(X: Tensor, yid_cls, yp, gen: Generator, lc: LatentClassifier,
                   disc: Discriminator, w: LossWeights, z1: Tensor, z2: Tensor,
                   secondary_adversarial: bool = True, fool_mode: str = "uniform"):
    """Full generator objective.

    Primary pass synthesizes at the frontal target pose; the secondary pass
    re-encodes the synthesis and restores the original pose, giving the
    pixel-wise cycle term. Returns (total, component dict, primary images).
    """
    B = X.data.shape[0]
    if B == 0:
        raise ValueError("generator_loss: empty batch")
    yp = np.asarray(yp, dtype=np.int64)
    ones = Tensor(np.ones(B, dtype=np.float32))

    idc, _pose_a = encode(gen, X, training=True)
    frontal = pose_onehot(np.zeros(B, dtype=np.int64))
    xhat = decode(gen, idc, frontal, z1, training=True)
    idc2, _pose_b = encode(gen, xhat, training=True)
    xtilde = decode(gen, idc2, pose_onehot(yp), z2, training=True)

    d_hat = discriminate(disc, xhat, training=True)
    adv = T.bce_with_logits(d_hat.realness_logit, ones)
    if secondary_adversarial:
        d_tilde = discriminate(disc, xtilde, training=True)
        adv = adv + T.bce_with_logits(d_tilde.realness_logit, ones)
    cycle = T.mse(xtilde, X)
    # "uniform" drives the classifier to indifference (its fixed point removes
    # the pose direction); "flip" rewards outright misclassification
    if fool_mode == "uniform":
        fool_target = Tensor(np.full(B, 0.5, dtype=np.float32))
    elif fool_mode == "flip":
        fool_target = Tensor((1 - yp).astype(np.float32))
    else:
        raise ValueError(f"unknown fool_mode {fool_mode!r}")
    fool = T.bce_with_logits(classify_latent(lc, idc), fool_target)
    ident = T.softmax_cross_entropy(d_hat.identity_logits, yid_cls)

    total = (w.w_adv * adv + w.w_cycle * cycle + w.w_fool * fool
             + w.w_id * ident)
    parts = {"g_adv": adv.item(), "cycle": cycle.item(),
             "fool": fool.item(), "id": ident.item()}
    return total, parts, xhat


def discriminator_loss(X: Tensor, fake: Tensor, yid_cls, yp,
                       disc: Discriminator, w: LossWeights):
    """Realness on reals and fakes, pose head on reals, identity head on
    reals (true class) and fakes (fake class). Also returns the real/fake
    accuracy of the realness head on this batch."""
    B = X.data.shape[0]
    if fake.data.shape[0] != B:
        raise ValueError(
            f"discriminator_loss: batch sizes differ ({B} vs {fake.data.shape[0]})"
        )
    ones = Tensor(np.ones(B, dtype=np.float32))
    zeros = Tensor(np.zeros(B, dtype=np.float32))
    d_real = discriminate(disc, X, training=True)
    d_fake = discriminate(disc, fake, training=True)
    real_term = T.bce_with_logits(d_real.realness_logit, ones)
    fake_term = T.bce_with_logits(d_fake.realness_logit, zeros)
    pose_term = T.softmax_cross_entropy(d_real.pose_logits, yp)
    fake_cls = np.full(B, disc.fake_class, dtype=np.int64)
    id_term = (T.softmax_cross_entropy(d_real.identity_logits, yid_cls)
               + T.softmax_cross_entropy(d_fake.identity_logits, fake_cls))
    total = real_term + fake_term + w.w_pose_d * pose_term + w.w_id * id_term
    acc = 0.5 * (float(np.mean(d_real.realness_logit.data > 0))
                 + float(np.mean(d_fake.realness_logit.data <= 0)))
    parts = {"d_real": real_term.item(), "d_fake": fake_term.item(),
             "d_pose": pose_term.item(), "d_id": id_term.item()}
    return total, parts, acc


def latent_classifier_loss(lc: LatentClassifier, identity_codes: Tensor, yp):
    """BCE of the latent classifier against true pose labels. The caller
    passes detached codes so gradients flow only into the classifier."""
    targets = Tensor(np.asarray(yp, dtype=np.float32))
    return T.bce_with_logits(classify_latent(lc, identity_codes), targets)


@dataclass
class TrainState:
    cfg: RunConfig
    net_cfg: NetConfig
    gen: Generator
    lc: LatentClassifier
    disc: Discriminator
    opt_g: Adam
    opt_lc: Adam
    opt_d: Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    pos_in_epoch: int = 0
    d_acc_window: deque = field(default_factory=lambda: deque(maxlen=50))


def new_state(cfg: RunConfig, n_identity_classes: int) -> TrainState:
    net_cfg = NetConfig(
        side=cfg.crop_side, d_id=cfg.d_id, d_pose=cfg.d_pose, d_z=cfg.d_z,
        base_channels=cfg.base_channels, lc_hidden=cfg.lc_hidden,
        n_identity_classes=n_identity_classes,
    )
    gen, lc, disc = init_networks(net_cfg, cfg.seed)
    kw = dict(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
              eps=cfg.epsilon)
    lc_kw = dict(kw, lr=cfg.lc_learning_rate or cfg.learning_rate)
    return TrainState(
        cfg=cfg, net_cfg=net_cfg, gen=gen, lc=lc, disc=disc,
        opt_g=Adam(gen.named_params(), **kw),
        opt_lc=Adam(lc.named_params(), **lc_kw),
        opt_d=Adam(disc.named_params(), **kw),
        rng=np.random.default_rng(cfg.seed),
        d_acc_window=deque(maxlen=cfg.d_acc_window),
    )


def _check_finite(parts: dict):
    for name, value in parts.items():
        if not math.isfinite(value):
            raise TrainAbort(name, value)


def discriminator_held(state: TrainState) -> bool:
    """The hold gate: skip the D update once rolling accuracy reaches the
    threshold. An empty window (start of training) never holds."""
    if not state.d_acc_window:
        return False
    return (sum(state.d_acc_window) / len(state.d_acc_window)
            >= state.cfg.d_hold_threshold)


def train_step(state: TrainState, X: Tensor, yid_cls, yp) -> dict:
    """One full update: LC, then generator, then (gated) discriminator."""
    cfg = state.cfg
    w = LossWeights.from_config(cfg)
    B = X.data.shape[0]

    # 1. latent classifier on detached codes (extra inner steps keep the
    # classifier tracking the encoder, so fooling it means removing pose)
    with no_grad():
        idc, _ = encode(state.gen, X, training=True)
    for _ in range(max(cfg.lc_steps, 1)):
        lc_loss = latent_classifier_loss(state.lc, Tensor(idc.data), yp)
        _check_finite({"lc": lc_loss.item()})
        lc_loss.backward()
        state.opt_lc.step()

    # 2. generator (shared encoder/decoder storage)
    z1 = Tensor(state.rng.standard_normal((B, cfg.d_z)).astype(np.float32))
    z2 = Tensor(state.rng.standard_normal((B, cfg.d_z)).astype(np.float32))
    g_total, g_parts, xhat = generator_loss(
        X, yid_cls, yp, state.gen, state.lc, state.disc, w, z1, z2,
        secondary_adversarial=cfg.secondary_adversarial,
        fool_mode=cfg.fool_mode,
    )
    _check_finite(g_parts)
    g_total.backward()
    state.opt_g.step()
    # adversarial/fooling terms deposit grads on D and LC; discard them
    state.opt_lc.zero_grad()
    state.opt_d.zero_grad()

    # 3. discriminator, gated by rolling accuracy
    held = discriminator_held(state)
    fake = xhat.detach()
    if held:
        with no_grad():
            d_total, d_parts, d_acc = discriminator_loss(
                X, fake, yid_cls, yp, state.disc, w)
    else:
        d_total, d_parts, d_acc = discriminator_loss(
            X, fake, yid_cls, yp, state.disc, w)
        _check_finite(d_parts)
        d_total.backward()
        state.opt_d.step()
    state.d_acc_window.append(d_acc)

    state.step += 1
    return {
        "loss_g_adv": g_parts["g_adv"], "loss_cycle": g_parts["cycle"],
        "loss_fool": g_parts["fool"], "loss_id": g_parts["id"],
        "loss_lc": lc_loss.item(), "loss_d": d_total.item(),
        "d_acc": d_acc, "held": int(held),
    }


def assemble_batch(ds: DatasetFile, indices, crop_side: int, id_map: dict,
                   rng=None):
    """Preprocess a batch; rng enables random crops (training)."""
    images = [preprocess(ds.images[i], crop_side, rng).data for i in indices]
    X = Tensor(np.stack(images))
    yid = np.array([id_map[int(ds.identity_labels[i])] for i in indices],
                   dtype=np.int64)
    yp = np.array([int(ds.pose_labels[i]) for i in indices], dtype=np.int64)
    return X, yid, yp


def epoch_order(cfg: RunConfig, n: int, epoch: int) -> np.ndarray:
    """Per-epoch shuffle from its own seed stream, so a resumed run can
    recompute it without disturbing the main rng."""
    return np.random.default_rng([cfg.seed, epoch, 0xD5]).permutation(n)


def history_row(step: int, epoch: int, row: dict) -> str:
    return (f"{step},{epoch},{row['loss_g_adv']:.6f},{row['loss_cycle']:.6f},"
            f"{row['loss_fool']:.6f},{row['loss_id']:.6f},{row['loss_lc']:.6f},"
            f"{row['loss_d']:.6f},{row['d_acc']:.4f},{row['held']}")


def train(cfg: RunConfig, run_dir, state: TrainState | None = None,
          ds: DatasetFile | None = None) -> TrainState:
    """Run the full schedule; writes config echo, history.csv, and one
    checkpoint per epoch into run_dir. Pass a loaded state to resume."""
    cfg.validate()
    if ds is None:
        ds = DatasetFile.load(cfg.dataset)
    if ds.side < cfg.crop_side:
        raise ValueError(
            f"dataset side {ds.side} smaller than crop_side {cfg.crop_side}"
        )
    train_ids, _test_ids = split(ds, cfg.train_fraction, cfg.split_seed)
    id_map = {ident: k for k, ident in enumerate(train_ids)}
    if state is None:
        state = new_state(cfg, len(train_ids))
    elif state.net_cfg.n_identity_classes != len(train_ids):
        raise ValueError(
            f"checkpoint trained with {state.net_cfg.n_identity_classes} "
            f"identity classes, dataset split has {len(train_ids)}"
        )
    else:
        # a resumed run continues under the caller's config (e.g. a raised
        # epoch budget); keep the accuracy window, re-bounded if needed
        state.cfg = cfg
        state.d_acc_window = deque(state.d_acc_window,
                                   maxlen=cfg.d_acc_window)

    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.resolved"), "w") as fh:
        fh.write(cfg.resolved_text())
    history_path = os.path.join(run_dir, "history.csv")
    fresh = state.step == 0
    with open(history_path, "w" if fresh else "a") as hist:
        if fresh:
            hist.write(HISTORY_HEADER + "\n")
        indices = ds.indices_for(train_ids)
        n = len(indices)
        n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
        while state.epoch < cfg.epochs:
            order = epoch_order(cfg, n, state.epoch)
            while state.pos_in_epoch < n_batches:
                lo = state.pos_in_epoch * cfg.batch_size
                batch_idx = indices[order[lo : lo + cfg.batch_size]]
                X, yid, yp = assemble_batch(ds, batch_idx, cfg.crop_side,
                                            id_map, state.rng)
                row = train_step(state, X, yid, yp)
                hist.write(history_row(state.step, state.epoch, row) + "\n")
                state.pos_in_epoch += 1
            state.epoch += 1
            state.pos_in_epoch = 0
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                checkpoint_save(
                    state, os.path.join(run_dir, f"epoch_{state.epoch}.pigc"))
    return state


# ---------------------------------------------------------------------------
# checkpoint format

def _write_table(fh, table: dict):
    fh.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        T.write_array(fh, arr)


def _read_table(fh) -> dict:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        out[name] = T.read_array(fh)
    return out


def _all_named_arrays(state: TrainState) -> dict:
    out = {}
    for name, p in {**state.gen.named_params(), **state.lc.named_params(),
                    **state.disc.named_params()}.items():
        out[name] = p.data
    for name, b in {**state.gen.named_buffers(),
                    **state.disc.named_buffers()}.items():
        out[name] = b
    return out


def _moment_arrays(state: TrainState) -> dict:
    out = {}
    for tag, opt in (("g", state.opt_g), ("lc", state.opt_lc),
                     ("d", state.opt_d)):
        for name, arr in opt.m.items():
            out[f"{tag}:m:{name}"] = arr
        for name, arr in opt.v.items():
            out[f"{tag}:v:{name}"] = arr
    return out


def checkpoint_save(state: TrainState, path):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        cfg_bytes = state.cfg.resolved_text().encode("utf-8")
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", state.net_cfg.n_identity_classes))
        _write_table(fh, _all_named_arrays(state))
        _write_table(fh, _moment_arrays(state))
        rng_bytes = json.dumps(state.rng.bit_generator.state).encode("utf-8")
        fh.write(struct.pack("<I", len(rng_bytes)))
        fh.write(rng_bytes)
        fh.write(struct.pack("<QIIIII", state.step, state.epoch,
                             state.pos_in_epoch, state.opt_g.t,
                             state.opt_lc.t, state.opt_d.t))
        fh.write(struct.pack("<I", len(state.d_acc_window)))
        for v in state.d_acc_window:
            fh.write(struct.pack("<d", v))


def checkpoint_load(path) -> TrainState:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = parse_config(fh.read(cfg_len).decode("utf-8"))
        (n_classes,) = struct.unpack("<I", fh.read(4))
        state = new_state(cfg, n_classes)
        tensors = _read_table(fh)
        moments = _read_table(fh)
        (rng_len,) = struct.unpack("<I", fh.read(4))
        rng_state = json.loads(fh.read(rng_len).decode("utf-8"))
        tail = fh.read(28)
        if len(tail) != 28:
            raise ValueError(f"{path}: truncated checkpoint")
        step, epoch, pos, t_g, t_lc, t_d = struct.unpack("<QIIIII", tail)
        (wlen,) = struct.unpack("<I", fh.read(4))
        raw = fh.read(8 * wlen)
        if len(raw) != 8 * wlen:
            raise ValueError(f"{path}: truncated checkpoint")
        window = struct.unpack(f"<{wlen}d", raw)

    params = {**state.gen.named_params(), **state.lc.named_params(),
              **state.disc.named_params()}
    buffers = {**state.gen.named_buffers(), **state.disc.named_buffers()}
    for name, arr in tensors.items():
        if name in params:
            params[name].data = arr
        elif name in buffers:
            buffers[name][...] = arr
        else:
            raise ValueError(f"{path}: unknown tensor '{name}' in checkpoint")
    for tag, opt in (("g", state.opt_g), ("lc", state.opt_lc),
                     ("d", state.opt_d)):
        # optimizers must point at the (possibly replaced) parameter arrays
        prefix_params = {k: v for k, v in params.items() if k in opt.params}
        opt.params = prefix_params
        for name in opt.m:
            opt.m[name] = moments[f"{tag}:m:{name}"]
            opt.v[name] = moments[f"{tag}:v:{name}"]
    state.rng.bit_generator.state = rng_state
    state.step, state.epoch, state.pos_in_epoch = step, epoch, pos
    state.opt_g.t, state.opt_lc.t, state.opt_d.t = t_g, t_lc, t_d
    state.d_acc_window = deque(window, maxlen=cfg.d_acc_window)
    return state
