"""Dense tensors over numpy with reverse-mode automatic differentiation.

Tensors default to float32. Passing float64 data keeps float64 end-to-end,
which the gradient-check tests rely on for tight finite-difference bounds.
The computation graph is recorded define-by-run: every op whose inputs
require gradients stores its parents and a backward closure, and
``Tensor.backward`` replays the recording in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False).reshape(self.data.shape)

    def backward(self):
        """Populate grads of every requires_grad tensor this scalar depends on."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward called on a tensor detached from any graph")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _sum_to(g, shape):
    # reverse numpy broadcasting: reduce g back down to `shape`
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(-_sum_to(g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x, shape) -> Tensor:
    x = _ensure(x)
    shape = tuple(shape)

    def bw(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), bw)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (used to split latent codes)."""
    x = _ensure(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _make(x.data[idx].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# reductions

def sum_all(x) -> Tensor:
    x = _ensure(x)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(x.data.sum(keepdims=False), (x,), bw)


def mean(x) -> Tensor:
    x = _ensure(x)
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return _make(x.data.mean(), (x,), bw)


# ---------------------------------------------------------------------------
# activations

def relu(x) -> Tensor:
    x = _ensure(x)
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0), (x,), bw)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _ensure(x)
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * np.where(mask, 1.0, slope))

    return _make(np.where(mask, x.data, slope * x.data), (x,), bw)


def tanh(x) -> Tensor:
    x = _ensure(x)
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), bw)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _ensure(x)
    y = _sigmoid(x.data)

    def bw(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _ensure(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner))

    return _make(y, (x,), bw)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x: (B,C,H,W), w: (O,C,KH,KW), bias: (O,)."""
    x, w = _ensure(x), _ensure(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d: incompatible shapes input {x.data.shape}, kernel {w.data.shape}"
        )
    B, C, H, W = x.data.shape
    O, _, KH, KW = w.data.shape
    OH = (H + 2 * pad - KH) // stride + 1
    OW = (W + 2 * pad - KW) // stride + 1
    if OH < 1 or OW < 1:
        raise ValueError(
            f"conv2d: kernel {w.data.shape} too large for input {x.data.shape} "
            f"with stride={stride} pad={pad}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((B, O, OH, OW), dtype=xp.dtype)
    for i in range(KH):
        for j in range(KW):
            patch = xp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride]
            out += np.einsum("bchw,oc->bohw", patch, w.data[:, :, i, j])
    parents = [x, w]
    if bias is not None:
        bias = _ensure(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        parents.append(bias)

    def bw(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for i in range(KH):
            for j in range(KW):
                sl = np.s_[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride]
                if gw is not None:
                    gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[sl])
                if gxp is not None:
                    gxp[sl] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j])
        if gw is not None:
            w._accumulate(gw)
        if gxp is not None:
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            x._accumulate(gx)

    return _make(out, tuple(parents), bw)


def conv2d_transpose(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 2-D convolution, x: (B,C,H,W), w: (C,O,KH,KW), bias: (O,)."""
    x, w = _ensure(x), _ensure(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"conv2d_transpose: incompatible shapes input {x.data.shape}, "
            f"kernel {w.data.shape}"
        )
    B, C, H, W = x.data.shape
    _, O, KH, KW = w.data.shape
    FH = (H - 1) * stride + KH
    FW = (W - 1) * stride + KW
    OH, OW = FH - 2 * pad, FW - 2 * pad
    if OH < 1 or OW < 1:
        raise ValueError(
            f"conv2d_transpose: pad={pad} swallows the whole output for input "
            f"{x.data.shape}, kernel {w.data.shape}"
        )
    full = np.zeros((B, O, FH, FW), dtype=x.data.dtype)
    for i in range(KH):
        for j in range(KW):
            full[:, :, i : i + stride * H : stride, j : j + stride * W : stride] += (
                np.einsum("bchw,co->bohw", x.data, w.data[:, :, i, j])
            )
    out = full[:, :, pad : pad + OH, pad : pad + OW].copy() if pad else full
    parents = [x, w]
    if bias is not None:
        bias = _ensure(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        parents.append(bias)

    def bw(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gfull = np.zeros((B, O, FH, FW), dtype=g.dtype)
        gfull[:, :, pad : pad + OH, pad : pad + OW] = g
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for i in range(KH):
            for j in range(KW):
                gs = gfull[:, :, i : i + stride * H : stride, j : j + stride * W : stride]
                if gx is not None:
                    gx += np.einsum("bohw,co->bchw", gs, w.data[:, :, i, j])
                if gw is not None:
                    gw[:, :, i, j] = np.einsum("bchw,bohw->co", x.data, gs)
        if gx is not None:
            x._accumulate(gx)
        if gw is not None:
            w._accumulate(gw)

    return _make(out, tuple(parents), bw)


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Batch norm over (B,F) or (B,C,H,W); running_* are plain numpy buffers
    updated in place when training."""
    x, gamma, beta = _ensure(x), _ensure(gamma), _ensure(beta)
    if x.data.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.data.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm: expected 2-D or 4-D input, got {x.data.shape}")
    if training and x.data.shape[0] < 2:
        raise ValueError("batch_norm: training mode needs batch size >= 2")

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)
    m = x.data.size // x.data.shape[view[0]]

    def bw(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(view)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(view)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(view)
                gx = inv_std.reshape(view) / m * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(view)
            x._accumulate(gx)

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses (scalar outputs)

def mse(pred, target) -> Tensor:
    pred, target = _ensure(pred), _ensure(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"mse: shape mismatch {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        scale = 2.0 * g / n
        if pred.requires_grad:
            pred._accumulate(scale * diff)
        if target.requires_grad:
            target._accumulate(-scale * diff)

    return _make(np.mean(diff * diff), (pred, target), bw)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy; targets in [0,1], same shape as logits."""
    logits, targets = _ensure(logits), _ensure(targets)
    if logits.data.shape != targets.data.shape:
        raise ValueError(
            f"bce_with_logits: shape mismatch {logits.data.shape} vs "
            f"{targets.data.shape}"
        )
    z, t = logits.data, targets.data
    # max(z,0) - z*t + log(1+exp(-|z|)) is the stable softplus form
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = _sigmoid(z)

    def bw(g):
        if logits.requires_grad:
            logits._accumulate(g / n * (p - t))
        if targets.requires_grad:
            targets._accumulate(-g / n * z)

    return _make(loss.mean(), (logits, targets), bw)


def softmax_cross_entropy(logits, classes) -> Tensor:
    """Mean cross entropy of (B,K) logits against integer class indices (B,)."""
    logits = _ensure(logits)
    classes = np.asarray(classes)
    if logits.data.ndim != 2 or classes.shape != (logits.data.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs "
            f"classes {classes.shape}"
        )
    B, K = logits.data.shape
    if classes.min() < 0 or classes.max() >= K:
        raise ValueError(
            f"softmax_cross_entropy: class index out of range for {K} classes"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(B), classes]).mean()
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def bw(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(B), classes] -= 1.0
            logits._accumulate(g / B * gl)

    return _make(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# initialization and serialization

def normal_init(shape, mean: float = 0.0, std: float = 0.02, seed=None,
                rng=None) -> Tensor:
    """Gaussian-initialized tensor; deterministic for a fixed seed or rng."""
    if std <= 0:
        raise ValueError(f"normal_init: std must be positive, got {std}")
    if rng is None:
        rng = np.random.default_rng(seed)
    return Tensor(rng.normal(mean, std, size=shape).astype(np.float32))


def write_array(fh, arr: np.ndarray):
    """Little-endian: u32 rank, u32 dims[rank], f32 data[product]."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def read_array(fh) -> np.ndarray:
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated tensor record")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
