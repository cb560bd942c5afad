"""Goal-conditioned policy pi(a | s, g) trained by hindsight maximum likelihood."""

from __future__ import annotations

import numpy as np

from .envs import ActionSpaceSpec
from .nn import (Adam, DenseNet, MdnOutput, categorical_nll, check_finite, load_checkpoint,
                 mdn_nll, mdn_sample, save_checkpoint, softmax)
from .replay import GcslBatch


class Policy:
    """Dense trunk on [s || g] with a categorical head (discrete) or an MDN head (continuous).

    The continuous head's mixture means are not anchored (anchor = 0).
    """

    def __init__(self, state_dim: int, action_space: ActionSpaceSpec, hidden=(400, 400),
                 K: int = 2, rng: np.random.Generator | None = None, dtype=np.float64,
                 net: DenseNet | None = None):
        self.state_dim = state_dim
        self.action_space = action_space
        self.head = "categorical" if action_space.discrete else "mdn"
        self.K = 1 if action_space.discrete else K
        if self.head == "categorical":
            out = action_space.n_actions
        else:
            out = self.K + 2 * self.K * action_space.dim
        sizes = [2 * state_dim, *hidden, out]
        if net is None:
            net = DenseNet(sizes, rng=rng, dtype=dtype)
        elif net.sizes[0] != sizes[0] or net.sizes[-1] != sizes[-1]:
            raise ValueError(f"network sizes {net.sizes} do not fit policy dims {sizes}")
        self.net = net

    @property
    def action_dim(self) -> int:
        return self.action_space.dim

    def inputs(self, s, g) -> np.ndarray:
        return np.concatenate([np.atleast_2d(s), np.atleast_2d(g)], axis=1)

    def raw(self, s, g) -> np.ndarray:
        return self.net(self.inputs(s, g))

    def mdn(self, raw) -> MdnOutput:
        return MdnOutput.from_raw(raw, self.K, self.action_dim)

    def _zero_anchor(self, n: int) -> np.ndarray:
        return np.zeros((n, self.action_dim), dtype=self.net.dtype)

    def loss_and_grad(self, batch: GcslBatch):
        raw, cache = self.net.forward(self.inputs(batch.s, batch.g))
        if self.head == "categorical":
            loss, g_raw = categorical_nll(raw, batch.a)
        else:
            loss, g_raw = mdn_nll(self.mdn(raw), self._zero_anchor(len(raw)), batch.a)
        return loss, self.net.backward(g_raw, cache)

    def act(self, s, g, rng: np.random.Generator | None = None, greedy: bool = True) -> np.ndarray:
        """Batched action selection; greedy takes the argmax logit / mean of the top mode."""
        raw = self.raw(s, g)
        n = len(raw)
        if self.head == "categorical":
            if greedy:
                return np.argmax(raw, axis=1)
            p = softmax(raw.astype(np.float64))
            u = rng.random((n, 1))
            return np.minimum((u > np.cumsum(p, axis=1)).sum(axis=1), p.shape[1] - 1)
        out = self.mdn(raw)
        if greedy:
            return out.offsets[np.arange(n), out.top_mode()].astype(np.float64)
        return mdn_sample(out, self._zero_anchor(n), rng).astype(np.float64)

    def header(self) -> dict:
        a = self.action_space
        return {"kind": "policy", "head": self.head, "K": self.K, "d": a.dim,
                "state_dim": self.state_dim, "action_kind": a.kind,
                "n_actions": a.n_actions, "max_norm": a.max_norm}

    def save(self, path) -> None:
        save_checkpoint(path, self.net, self.header())

    @classmethod
    def load(cls, path) -> "Policy":
        net, meta = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r}, not a policy")
        space = ActionSpaceSpec(meta["action_kind"], n_actions=meta["n_actions"],
                                dim=meta["d"], max_norm=meta["max_norm"])
        return cls(meta["state_dim"], space, hidden=net.sizes[1:-1], K=meta["K"], net=net)


def gcsl_train_step(policy: Policy, batch: GcslBatch, opt: Adam) -> float:
    """One Adam step on the mean action NLL; returns the pre-step loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grad = policy.loss_and_grad(batch)
    check_finite(np.array([loss]), "GCSL loss")
    opt.step(policy.net.params, grad)
    return loss


def act(policy: Policy, s, g, rng=None, greedy: bool = True):
    """Single-query convenience wrapper around Policy.act."""
    a = policy.act(np.asarray(s)[None], np.asarray(g)[None], rng, greedy)[0]
    return int(a) if policy.head == "categorical" else a
