"""Disentanglement and synthesis metrics over a frozen generator.

All passes here are eval-mode and read-only: batch norm uses running
statistics, nothing touches parameters, and every metric is deterministic
for a fixed eval seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import FRONTAL, PROFILE, DatasetFile, preprocess
from .networks import Generator, decode, encode
from .tensor import Tensor, no_grad
from .training import pose_onehot

PSNR_SENTINEL = 999.0  # reported when mse is exactly 0


@dataclass
class MetricsReport:
    pose_probe_accuracy: float
    pixel_probe_accuracy: float
    cycle_mse: float
    cycle_psnr: float
    verification_ff: float
    verification_fp: float
    n_probe: int
    n_cycle: int
    n_pairs_ff: int
    n_pairs_fp: int


@dataclass
class Projection2D:
    points: np.ndarray  # (N, 2)
    identity_labels: np.ndarray
    pose_labels: np.ndarray
    final_kl: float
    kl_history: np.ndarray


def encode_samples(gen: Generator, ds: DatasetFile, indices, crop_side: int):
    """Eval-mode identity codes for the given samples (center crop)."""
    imgs = np.stack([preprocess(ds.images[i], crop_side).data for i in indices])
    with no_grad():
        idc, _ = encode(gen, Tensor(imgs), training=False)
    return idc.data.copy()


# ---------------------------------------------------------------------------
# logistic probe

def logistic_probe(features: np.ndarray, labels: np.ndarray,
                   steps: int = 200, lr: float = 0.5, seed: int = 0) -> float:
    """Train a fresh logistic regression on half the samples (stratified),
    return accuracy on the other half. A weak probe by design: near-chance
    accuracy is evidence the labels are absent from the features."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("probe needs both classes present")
    rng = np.random.default_rng(seed)
    train_idx, eval_idx = [], []
    for c in classes:
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        half = members.size // 2
        train_idx.extend(members[:half].tolist())
        eval_idx.extend(members[half:].tolist())
    train_idx, eval_idx = np.array(sorted(train_idx)), np.array(sorted(eval_idx))

    x = features.astype(np.float64)
    mu, sd = x[train_idx].mean(axis=0), x[train_idx].std(axis=0) + 1e-8
    x = (x - mu) / sd
    y = labels.astype(np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    xt, yt = x[train_idx], y[train_idx]
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xt @ w + b)))
        g = p - yt
        w -= lr * (xt.T @ g) / len(yt)
        b -= lr * g.mean()
    pred = (x[eval_idx] @ w + b) > 0
    return float(np.mean(pred == labels[eval_idx]))


def pose_leakage_probe(gen: Generator, ds: DatasetFile, indices,
                       crop_side: int, probe_steps: int = 200,
                       seed: int = 0) -> float:
    codes = encode_samples(gen, ds, indices, crop_side)
    labels = ds.pose_labels[indices].astype(np.int64)
    return logistic_probe(codes, labels, steps=probe_steps, seed=seed)


def pixel_probe(ds: DatasetFile, indices, crop_side: int,
                probe_steps: int = 200, seed: int = 0) -> float:
    """Same probe on raw pixels: upper reference showing the pose signal
    is trivially present in image space."""
    feats = np.stack([
        preprocess(ds.images[i], crop_side).data.reshape(-1) for i in indices
    ])
    labels = ds.pose_labels[indices].astype(np.int64)
    return logistic_probe(feats, labels, steps=probe_steps, seed=seed)


# ---------------------------------------------------------------------------
# cyclic reconstruction

def psnr_from_mse(mse: float) -> float:
    # peak-to-peak is 2 for images in [-1, 1]
    if mse <= 0.0:
        return PSNR_SENTINEL
    return 10.0 * np.log10(4.0 / mse)


def cycle_reconstruct(gen: Generator, X: Tensor, yp, d_z: int, rng) -> Tensor:
    """Eval-mode double pass: encode, synthesize frontal, re-encode,
    restore the original pose."""
    B = X.data.shape[0]
    with no_grad():
        idc, _ = encode(gen, X, training=False)
        z1 = Tensor(rng.standard_normal((B, d_z)).astype(np.float32))
        xhat = decode(gen, idc, pose_onehot(np.zeros(B, dtype=np.int64)), z1,
                      training=False)
        idc2, _ = encode(gen, xhat, training=False)
        z2 = Tensor(rng.standard_normal((B, d_z)).astype(np.float32))
        xtilde = decode(gen, idc2, pose_onehot(yp), z2, training=False)
    return xtilde


def cycle_metrics(gen: Generator, ds: DatasetFile, indices, crop_side: int,
                  d_z: int, eval_seed: int = 1234):
    if len(indices) == 0:
        raise ValueError("cycle_metrics: empty sample set")
    rng = np.random.default_rng(eval_seed)
    imgs = np.stack([preprocess(ds.images[i], crop_side).data for i in indices])
    X = Tensor(imgs)
    yp = ds.pose_labels[indices].astype(np.int64)
    xtilde = cycle_reconstruct(gen, X, yp, d_z, rng)
    mse = float(np.mean((xtilde.data - X.data) ** 2))
    return mse, psnr_from_mse(mse)


# ---------------------------------------------------------------------------
# verification

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _pairs_for_protocol(pose_labels, protocol: str):
    n = len(pose_labels)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            pi, pj = pose_labels[i], pose_labels[j]
            if protocol == "ff" and pi == FRONTAL and pj == FRONTAL:
                pairs.append((i, j))
            elif protocol == "fp" and {pi, pj} == {FRONTAL, PROFILE}:
                pairs.append((i, j))
    return pairs


def verification(gen: Generator, ds: DatasetFile, indices, crop_side: int,
                 protocol: str):
    """Same-vs-different identity decision on pose-filtered pairs via cosine
    similarity of identity codes, at the best swept threshold.

    Returns (accuracy, threshold, n_pairs).
    """
    protocol = protocol.lower()
    if protocol not in ("ff", "fp"):
        raise ValueError(f"verification: protocol must be 'ff' or 'fp', got {protocol!r}")
    ids = ds.identity_labels[indices].astype(np.int64)
    if np.unique(ids).size < 2:
        raise ValueError("verification: need at least 2 test identities")
    poses = ds.pose_labels[indices].astype(np.int64)
    pairs = _pairs_for_protocol(poses, protocol)
    if not pairs:
        raise ValueError(
            f"verification: no pairs available for protocol '{protocol}'")
    codes = encode_samples(gen, ds, indices, crop_side)
    sims = np.array([cosine_similarity(codes[i], codes[j]) for i, j in pairs])
    same = np.array([ids[i] == ids[j] for i, j in pairs])
    best_acc, best_thr = 0.0, 0.0
    cut_points = np.unique(sims)
    candidates = np.concatenate((
        [cut_points[0] - 1e-6],
        (cut_points[:-1] + cut_points[1:]) / 2 if cut_points.size > 1 else [],
        [cut_points[-1] + 1e-6],
    ))
    for thr in candidates:
        acc = float(np.mean((sims > thr) == same))
        if acc > best_acc:
            best_acc, best_thr = acc, float(thr)
    return best_acc, best_thr, len(pairs)


# ---------------------------------------------------------------------------
# t-SNE

def tsne_project(latents: np.ndarray, perplexity: float = 15.0,
                 iterations: int = 500, seed: int = 0,
                 exaggeration: float = 4.0, learning_rate: float = 100.0,
                 identity_labels=None, pose_labels=None) -> Projection2D:
    """Project to 2-D: symmetrized Gaussian neighbor distribution with
    per-point bandwidth matched to the perplexity, Student-t low-dimensional
    kernel, momentum gradient descent with early exaggeration for the first
    100 iterations."""
    x = np.asarray(latents, dtype=np.float64)
    n = x.shape[0]
    if n < 3 * perplexity:
        raise ValueError(
            f"tsne: need at least {int(3 * perplexity)} points for "
            f"perplexity {perplexity}, got {n}"
        )
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)

    target_entropy = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(60):
            w = np.exp(-di * beta)
            s = w.sum()
            if s <= 0:
                h = 0.0
            else:
                p = w / s
                h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
            if abs(h - target_entropy) < 1e-6:
                break
            if h > target_entropy:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (lo + beta) / 2.0
        w = np.exp(-di * beta)
        row = w / max(w.sum(), 1e-300)
        P[i, np.arange(n) != i] = row
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, 2)) * 1e-4
    vel = np.zeros_like(y)
    kl_history = np.empty(iterations)
    exag_until = min(100, iterations)
    for it in range(iterations):
        Pe = P * exaggeration if it < exag_until else P
        ysq = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(
            ysq[:, None] + ysq[None, :] - 2.0 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        Q = num / num.sum()
        Q = np.maximum(Q, 1e-12)
        # KL against the true (non-exaggerated) P, so the descent is comparable
        kl_history[it] = float(np.sum(P * np.log(P / Q)))
        PQ = (Pe - num / num.sum()) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ y)
        momentum = 0.5 if it < 250 else 0.8
        vel = momentum * vel - learning_rate * grad
        y = y + vel
        y = y - y.mean(axis=0)

    ids = (np.asarray(identity_labels) if identity_labels is not None
           else np.zeros(n, dtype=np.int64))
    poses = (np.asarray(pose_labels) if pose_labels is not None
             else np.zeros(n, dtype=np.int64))
    return Projection2D(y, ids, poses, float(kl_history[-1]), kl_history)


# ---------------------------------------------------------------------------
# report export

def to_u8(img: np.ndarray) -> np.ndarray:
    """[-1,1] float image (C,H,W) or (H,W) to u8 grayscale (H,W)."""
    if img.ndim == 3:
        img = img[0]
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def pair_mosaic(inputs, outputs, pairs_per_row: int = 8) -> np.ndarray:
    """Tile input|generated pairs left-to-right, row-major."""
    n = len(inputs)
    side = to_u8(inputs[0]).shape[0]
    rows = (n + pairs_per_row - 1) // pairs_per_row
    canvas = np.zeros((rows * side, pairs_per_row * 2 * side), dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, pairs_per_row)
        canvas[r * side:(r + 1) * side, 2 * c * side:(2 * c + 1) * side] = to_u8(inputs[k])
        canvas[r * side:(r + 1) * side, (2 * c + 1) * side:(2 * c + 2) * side] = to_u8(outputs[k])
    return canvas


def export_report(report: MetricsReport, projection: Projection2D | None,
                  out_dir, mosaic: np.ndarray | None = None):
    os.makedirs(out_dir, exist_ok=True)
    rows = [
        ("pose_probe_accuracy", report.pose_probe_accuracy, report.n_probe),
        ("pixel_probe_accuracy", report.pixel_probe_accuracy, report.n_probe),
        ("cycle_mse", report.cycle_mse, report.n_cycle),
        ("cycle_psnr", report.cycle_psnr, report.n_cycle),
        ("verification_ff", report.verification_ff, report.n_pairs_ff),
        ("verification_fp", report.verification_fp, report.n_pairs_fp),
    ]
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("metric,value,n\n")
        for name, value, n in rows:
            fh.write(f"{name},{value:.6g},{n}\n")
    if projection is not None:
        with open(os.path.join(out_dir, "projection.csv"), "w") as fh:
            fh.write("x,y,identity,pose\n")
            for (px, py), ident, pose in zip(projection.points,
                                             projection.identity_labels,
                                             projection.pose_labels):
                fh.write(f"{px:.6g},{py:.6g},{int(ident)},{int(pose)}\n")
    if mosaic is not None:
        write_pgm(os.path.join(out_dir, "pairs.pgm"), mosaic)
