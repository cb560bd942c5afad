"""Trajectory encoder pi_S(m | s, g, t): sub-goal likelihood, edge and self-consistency
regularizers, BestMode and sub-goal mediated action selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gcsl import Policy
from .nn import (Adam, DenseNet, MdnOutput, check_finite, load_checkpoint, mdn_nll, mdn_sample,
                 save_checkpoint)
from .replay import ReplayBuffer, TrailBatch


@dataclass
class TrailLossConfig:
    alpha_edge: float = 0.01
    alpha_sc: float = 0.01
    K: int = 2

    def __post_init__(self):
        if self.alpha_edge < 0 or self.alpha_sc < 0 or self.K < 1:
            raise ValueError("alphas must be >= 0 and K >= 1")


class TrajectoryEncoder:
    """MDN over states with means anchored at the current state s; input [s || g || t]."""

    def __init__(self, state_dim: int, K: int = 2, hidden=(400, 400),
                 rng: np.random.Generator | None = None, dtype=np.float64,
                 net: DenseNet | None = None):
        self.state_dim = state_dim
        self.K = K
        sizes = [2 * state_dim + 1, *hidden, K + 2 * K * state_dim]
        if net is None:
            net = DenseNet(sizes, rng=rng, dtype=dtype)
        elif net.sizes[0] != sizes[0] or net.sizes[-1] != sizes[-1]:
            raise ValueError(f"network sizes {net.sizes} do not fit encoder dims {sizes}")
        self.net = net

    def inputs(self, s, g, t) -> np.ndarray:
        s, g = np.atleast_2d(s), np.atleast_2d(g)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (len(s), 1))
        return np.concatenate([s, g, t], axis=1)

    def mdn(self, raw) -> MdnOutput:
        return MdnOutput.from_raw(raw, self.K, self.state_dim)

    def predict(self, s, g, t) -> MdnOutput:
        return self.mdn(self.net(self.inputs(s, g, t)))

    def means(self, s, g, t) -> np.ndarray:
        return self.predict(s, g, t).means(np.atleast_2d(s))

    def header(self) -> dict:
        return {"kind": "encoder", "head": "mdn", "K": self.K, "d": self.state_dim,
                "state_dim": self.state_dim}

    def save(self, path) -> None:
        save_checkpoint(path, self.net, self.header())

    @classmethod
    def load(cls, path) -> "TrajectoryEncoder":
        net, meta = load_checkpoint(path)
        if meta.get("kind") != "encoder":
            raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r}, not an encoder")
        return cls(meta["state_dim"], K=meta["K"], hidden=net.sizes[1:-1], net=net)


# Loss heads work on raw network outputs so several losses can share one
# forward/backward pass. Each returns (loss, d loss / d raw).

def _subgoal_head(enc: TrajectoryEncoder, raw, s, m):
    return mdn_nll(enc.mdn(raw), s, m)


def _edge_head(enc: TrajectoryEncoder, raw0, raw1, s, g):
    """Squared distance of the top mode's t=0 mean to s and t=1 mean to g."""
    n = len(s)
    rows = np.arange(n)
    out0, out1 = enc.mdn(raw0), enc.mdn(raw1)
    k0, k1 = out0.top_mode(), out1.top_mode()
    # mean = s + offset, so the t=0 residual is the offset itself
    r0 = out0.offsets[rows, k0]
    r1 = s + out1.offsets[rows, k1] - g
    loss = (np.sum(r0 * r0) + np.sum(r1 * r1)) / n
    d0 = np.zeros_like(out0.offsets)
    d1 = np.zeros_like(out1.offsets)
    d0[rows, k0] = 2.0 * r0 / n
    d1[rows, k1] = 2.0 * r1 / n
    return float(loss), out0.raw_grad(d_offsets=d0), out1.raw_grad(d_offsets=d1)


def _sc_head(enc: TrajectoryEncoder, raw, s, mode, target):
    n = len(s)
    rows = np.arange(n)
    out = enc.mdn(raw)
    r = s + out.offsets[rows, mode] - target
    loss = np.sum(r * r) / n
    d = np.zeros_like(out.offsets)
    d[rows, mode] = 2.0 * r / n
    return float(loss), out.raw_grad(d_offsets=d)


@dataclass
class SelfConsistencyQuery:
    t: np.ndarray  # t1 * t2, where the regularized prediction is made
    mode: np.ndarray  # k' = top mode at (s, g, t1)
    target: np.ndarray  # m2 = mu_k'(s, m1, t2), held constant


def self_consistency_targets(enc: TrajectoryEncoder, s, g, rng: np.random.Generator,
                             t1=None, t2=None) -> SelfConsistencyQuery:
    n = len(s)
    t1 = rng.random(n) if t1 is None else np.broadcast_to(t1, (n,))
    t2 = rng.random(n) if t2 is None else np.broadcast_to(t2, (n,))
    rows = np.arange(n)
    out1 = enc.predict(s, g, t1)
    mode = out1.top_mode()
    m1 = s + out1.offsets[rows, mode]
    out2 = enc.predict(s, m1, t2)
    m2 = s + out2.offsets[rows, mode]
    return SelfConsistencyQuery(t1 * t2, mode, m2)


def subgoal_loss(enc: TrajectoryEncoder, batch: TrailBatch):
    raw, cache = enc.net.forward(enc.inputs(batch.s, batch.g, batch.t))
    loss, g_raw = _subgoal_head(enc, raw, batch.s, batch.m)
    return loss, enc.net.backward(g_raw, cache)


def edge_loss(enc: TrajectoryEncoder, s, g):
    n = len(s)
    x = np.concatenate([enc.inputs(s, g, 0.0), enc.inputs(s, g, 1.0)])
    raw, cache = enc.net.forward(x)
    loss, g0, g1 = _edge_head(enc, raw[:n], raw[n:], s, g)
    return loss, enc.net.backward(np.concatenate([g0, g1]), cache)


def self_consistency_loss(enc: TrajectoryEncoder, s, g, rng: np.random.Generator,
                          t1=None, t2=None):
    q = self_consistency_targets(enc, s, g, rng, t1, t2)
    raw, cache = enc.net.forward(enc.inputs(s, g, q.t))
    loss, g_raw = _sc_head(enc, raw, s, q.mode, q.target)
    return loss, enc.net.backward(g_raw, cache)


@dataclass
class TrailLosses:
    total: float
    sub: float
    edge: float
    sc: float


def trail_loss_and_grad(enc: TrajectoryEncoder, sub: TrailBatch, edge_pairs, sc_pairs,
                        sc_rng: np.random.Generator, cfg: TrailLossConfig,
                        t1=None, t2=None, report_all: bool = True):
    """Weighted sub-goal + edge + self-consistency loss with one shared backward pass.

    Terms with a zero weight contribute no rows to the backward pass. They are
    still evaluated for reporting unless ``report_all`` is off, in which case
    they come back as NaN.
    """
    es, eg = edge_pairs
    cs, cg = sc_pairs
    need_sc = cfg.alpha_sc > 0 or report_all
    q = self_consistency_targets(enc, cs, cg, sc_rng, t1, t2) if need_sc else None
    n_sub, n_e = len(sub), len(es)
    blocks = [enc.inputs(sub.s, sub.g, sub.t)]
    if cfg.alpha_edge > 0:
        blocks += [enc.inputs(es, eg, 0.0), enc.inputs(es, eg, 1.0)]
    if cfg.alpha_sc > 0:
        blocks.append(enc.inputs(cs, cg, q.t))
    raw, cache = enc.net.forward(np.concatenate(blocks))
    l_sub, g_sub = _subgoal_head(enc, raw[:n_sub], sub.s, sub.m)
    grads = [g_sub]
    off = n_sub
    if cfg.alpha_edge > 0:
        l_edge, g0, g1 = _edge_head(enc, raw[off:off + n_e], raw[off + n_e:off + 2 * n_e], es, eg)
        grads += [cfg.alpha_edge * g0, cfg.alpha_edge * g1]
        off += 2 * n_e
    elif not report_all:
        l_edge = float("nan")
    else:
        n = len(es)
        raw_e = enc.net(np.concatenate([enc.inputs(es, eg, 0.0), enc.inputs(es, eg, 1.0)]))
        l_edge = _edge_head(enc, raw_e[:n], raw_e[n:], es, eg)[0]
    if cfg.alpha_sc > 0:
        l_sc, g_sc = _sc_head(enc, raw[off:], cs, q.mode, q.target)
        grads.append(cfg.alpha_sc * g_sc)
    elif not report_all:
        l_sc = float("nan")
    else:
        l_sc = _sc_head(enc, enc.net(enc.inputs(cs, cg, q.t)), cs, q.mode, q.target)[0]
    grad = enc.net.backward(np.concatenate(grads), cache)
    total = l_sub
    if cfg.alpha_edge > 0:
        total += cfg.alpha_edge * l_edge
    if cfg.alpha_sc > 0:
        total += cfg.alpha_sc * l_sc
    return TrailLosses(total, l_sub, l_edge, l_sc), grad


@dataclass
class TrailRngs:
    """Independent streams for the three batch draws and the t1/t2 draws."""

    sub: np.random.Generator
    edge: np.random.Generator
    sc: np.random.Generator
    sc_t: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "TrailRngs":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(c) for c in ss.spawn(4)))


def trail_train_step(enc: TrajectoryEncoder, buffer: ReplayBuffer, cfg: TrailLossConfig,
                     opt: Adam, rngs: TrailRngs, batch_size: int = 256,
                     report_all: bool = True) -> TrailLosses:
    sub = buffer.sample_trail(batch_size, rngs.sub)
    edge_pairs = buffer.sample_pairs(batch_size, rngs.edge)
    sc_pairs = buffer.sample_pairs(batch_size, rngs.sc)
    losses, grad = trail_loss_and_grad(enc, sub, edge_pairs, sc_pairs, rngs.sc_t, cfg,
                                       report_all=report_all)
    check_finite(np.array([losses.total]), "TraIL loss")
    opt.step(enc.net.params, grad)
    return losses


def best_mode_from_outputs(out0: MdnOutput, out1: MdnOutput, s, g) -> np.ndarray:
    """argmin_k ||mu_k(t=0) - s||^2 + ||mu_k(t=1) - g||^2, lowest index on ties."""
    s, g = np.atleast_2d(s), np.atleast_2d(g)
    cost = (np.sum(out0.offsets ** 2, axis=-1)
            + np.sum((s[:, None, :] + out1.offsets - g[:, None, :]) ** 2, axis=-1))
    return np.argmin(cost, axis=1)


def best_mode(enc: TrajectoryEncoder, s, g) -> np.ndarray:
    s, g = np.atleast_2d(s), np.atleast_2d(g)
    n = len(s)
    raw = enc.net(np.concatenate([enc.inputs(s, g, 0.0), enc.inputs(s, g, 1.0)]))
    return best_mode_from_outputs(enc.mdn(raw[:n]), enc.mdn(raw[n:]), s, g)


def subgoal_time(i, T: int):
    """t = max(0.5, (i + 1) / T): the sub-goal moves toward g as the episode runs out."""
    return np.maximum(0.5, (np.asarray(i, dtype=np.float64) + 1.0) / T)


def predict_subgoal(enc: TrajectoryEncoder, s, g, t, rng=None, stochastic: bool = False):
    """Sub-goal from the BestMode component at time t: its mean, or a draw from it."""
    s, g = np.atleast_2d(s), np.atleast_2d(g)
    n = len(s)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    raw = enc.net(np.concatenate([enc.inputs(s, g, 0.0), enc.inputs(s, g, 1.0),
                                  enc.inputs(s, g, t)]))
    k = best_mode_from_outputs(enc.mdn(raw[:n]), enc.mdn(raw[n:2 * n]), s, g)
    out = enc.mdn(raw[2 * n:])
    if stochastic:
        return mdn_sample(out, s, rng, mode=k)
    return s + out.offsets[np.arange(n), k]


def get_action(policy: Policy, enc: TrajectoryEncoder, s, g, i, T: int,
               rng: np.random.Generator | None = None, stochastic: bool = False, t=None):
    """Batched GetAction: BestMode sub-goal at t, then the policy queried toward it."""
    if t is None:
        t = subgoal_time(i, T)
    m = predict_subgoal(enc, s, g, t, rng, stochastic)
    return policy.act(s, m, rng, greedy=not stochastic)
