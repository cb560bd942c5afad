"""Dense ReLU networks with hand-written reverse mode, MDN / categorical heads and Adam.

All parameters of a network live in one flat vector; per-layer weight and
bias arrays are views into it, so optimizers and checkpoints work on the
flat vector directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN, LOG_STD_MAX = -10.0, 3.0
CHECKPOINT_MAGIC = b"TRAILCKPT1\n"


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def _layer_views(flat: np.ndarray, shapes):
    views, off = [], 0
    for n_in, n_out in shapes:
        w = flat[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = flat[off:off + n_out]
        off += n_out
        views.append((w, b))
    return views


class DenseNet:
    """ReLU on hidden layers, linear output; inputs are (batch, in_dim)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = [int(s) for s in sizes]
        self.shapes = list(zip(self.sizes[:-1], self.sizes[1:]))
        self.dtype = np.dtype(dtype)
        self.params = np.zeros(sum(i * o + o for i, o in self.shapes), dtype=self.dtype)
        self.layers = _layer_views(self.params, self.shapes)
        if rng is not None:
            self.init(rng)

    def init(self, rng: np.random.Generator) -> None:
        # He-uniform on ReLU layers, LeCun-uniform on the linear output; zero biases
        for idx, (w, b) in enumerate(self.layers):
            fan_in = w.shape[0]
            limit = math.sqrt((6.0 if idx < len(self.layers) - 1 else 3.0) / fan_in)
            w[...] = rng.uniform(-limit, limit, size=w.shape)
            b[...] = 0.0

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def __len__(self) -> int:
        return self.params.size

    def copy(self) -> "DenseNet":
        other = DenseNet(self.sizes, dtype=self.dtype)
        other.params[...] = self.params
        return other

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (N, {self.in_dim}), got {x.shape}")
        cache = [x]
        h = x
        last = len(self.layers) - 1
        for idx, (w, b) in enumerate(self.layers):
            h = h @ w
            h += b
            if idx < last:
                np.maximum(h, 0.0, out=h)
                cache.append(h)
        return h, cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, grad_out, cache) -> np.ndarray:
        """Gradient of sum(grad_out * output) wrt the flat parameter vector."""
        grad = np.empty_like(self.params)
        gviews = _layer_views(grad, self.shapes)
        delta = np.asarray(grad_out, dtype=self.dtype)
        for idx in range(len(self.layers) - 1, -1, -1):
            gw, gb = gviews[idx]
            a_in = cache[idx]
            np.matmul(a_in.T, delta, out=gw)
            delta.sum(axis=0, out=gb)
            if idx > 0:
                delta = delta @ self.layers[idx][0].T
                delta *= a_in > 0
        return grad


def logsumexp(x, axis=-1, keepdims=False):
    mx = np.max(x, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def categorical_nll(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = len(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


@dataclass
class MdnOutput:
    """Mixture parameters for a batch: logits (N, K), offsets and log-stds (N, K, d)."""

    logits: np.ndarray
    offsets: np.ndarray
    log_std: np.ndarray
    log_std_mask: np.ndarray = field(repr=False)
    raw_log_std: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_raw(cls, raw, K: int, d: int) -> "MdnOutput":
        raw = np.atleast_2d(raw)
        if raw.shape[1] != K + 2 * K * d:
            raise ValueError(f"raw MDN output width {raw.shape[1]} != K + 2Kd = {K + 2 * K * d}")
        n = raw.shape[0]
        raw_ls = raw[:, K + K * d:].reshape(n, K, d)
        return cls(raw[:, :K], raw[:, K:K + K * d].reshape(n, K, d),
                   np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX),
                   (raw_ls > LOG_STD_MIN) & (raw_ls < LOG_STD_MAX), raw_ls)

    @property
    def K(self) -> int:
        return self.logits.shape[1]

    @property
    def d(self) -> int:
        return self.offsets.shape[2]

    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    def means(self, anchor) -> np.ndarray:
        return np.asarray(anchor)[:, None, :] + self.offsets

    def top_mode(self) -> np.ndarray:
        # np.argmax returns the lowest index on ties
        return np.argmax(self.logits, axis=1)

    def raw_grad(self, d_logits=None, d_offsets=None, d_log_std=None) -> np.ndarray:
        """Assemble a gradient wrt the raw head output from per-part gradients."""
        n, K, d = self.offsets.shape
        out = np.zeros((n, K + 2 * K * d), dtype=self.offsets.dtype)
        if d_logits is not None:
            out[:, :K] = d_logits
        if d_offsets is not None:
            out[:, K:K + K * d] = d_offsets.reshape(n, K * d)
        if d_log_std is not None:
            out[:, K + K * d:] = (d_log_std * self.log_std_mask).reshape(n, K * d)
        return out


def mdn_log_likelihood(out: MdnOutput, anchor, target):
    """Per-sample log-density plus the per-mode joint terms used for gradients."""
    mu = out.means(anchor)
    inv_std = np.exp(-out.log_std)
    z = (np.asarray(target)[:, None, :] - mu) * inv_std
    log_n = -0.5 * out.d * LOG_2PI - out.log_std.sum(-1) - 0.5 * np.sum(z * z, axis=-1)
    joint = log_softmax(out.logits) + log_n
    ll = logsumexp(joint, axis=1)
    return ll, joint, z, inv_std


def mdn_nll(out: MdnOutput, anchor, target):
    """Mean negative log-likelihood of target under the mixture, and d(loss)/d(raw head)."""
    ll, joint, z, inv_std = mdn_log_likelihood(out, anchor, target)
    n = len(ll)
    resp = np.exp(joint - ll[:, None])
    d_logits = (out.weights() - resp) / n
    d_offsets = -(resp[:, :, None] * z * inv_std) / n
    d_log_std = resp[:, :, None] * (1.0 - z * z) / n
    return float(-ll.mean()), out.raw_grad(d_logits, d_offsets, d_log_std)


def mdn_sample(out: MdnOutput, anchor, rng: np.random.Generator, mode=None) -> np.ndarray:
    """Draw one sample per row; mode is drawn from the mixture weights unless given."""
    n = out.logits.shape[0]
    if mode is None:
        cum = np.cumsum(out.weights(), axis=1)
        u = rng.random((n, 1))
        mode = np.minimum((u > cum).sum(axis=1), out.K - 1)
    else:
        mode = np.broadcast_to(np.asarray(mode, dtype=np.int64), (n,))
        if mode.min() < 0 or mode.max() >= out.K:
            raise ValueError("mode index out of range")
    rows = np.arange(n)
    mu = out.means(anchor)[rows, mode]
    # only the upper clamp matters when sampling; tiny variances are harmless here
    log_std = out.log_std if out.raw_log_std is None else np.minimum(out.raw_log_std, LOG_STD_MAX)
    std = np.exp(log_std[rows, mode])
    return mu + std * rng.standard_normal(mu.shape)


def check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite entries")


@dataclass
class Adam:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """In-place Adam update with bias correction; returns params."""
        if grad.shape != params.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
        check_finite(grad, f"gradient at Adam step {self.t + 1}")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.clip_norm:
                grad = grad * (self.clip_norm / norm)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def numerical_grad(f: Callable[[], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of f() wrt params, perturbing params in place."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        fp = f()
        params[i] = orig - h
        fm = f()
        params[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor * max|a|)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def save_checkpoint(path, net: DenseNet, header: dict) -> None:
    meta = dict(header, sizes=net.sizes, dtype=net.dtype.name, n_params=len(net))
    payload = net.params.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> tuple[DenseNet, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    try:
        meta = json.loads(rest[:nl].decode())
        sizes = meta["sizes"]
        n_params = int(meta["n_params"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    payload = rest[nl + 1:]
    if len(payload) != 8 * n_params:
        raise CheckpointError(f"{path}: expected {8 * n_params} parameter bytes, found {len(payload)}")
    net = DenseNet(sizes, dtype=meta.get("dtype", "float64"))
    if len(net) != n_params:
        raise CheckpointError(f"{path}: header sizes imply {len(net)} parameters, not {n_params}")
    net.params[...] = np.frombuffer(payload, dtype="<f8")
    return net, meta
