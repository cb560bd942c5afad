"""Trajectory storage and hindsight relabeling samplers.

Indices handed out by the samplers are 1-based over each stored
trajectory's own state count T: i ~ U{1..T-1}, j ~ U{i+1..T}, k ~ U{i..j}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray  # (L + 1, state_dim)
    actions: np.ndarray  # (L,) discrete or (L, action_dim) continuous
    success: bool = False

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.asarray(self.actions)
        if len(self.actions) != len(self.states) - 1:
            raise ValueError(
                f"trajectory has {len(self.states)} states but {len(self.actions)} actions")

    def __len__(self) -> int:
        return len(self.states)


def trim(traj: Trajectory, tol: float = 0.0) -> Trajectory:
    """Drop every state equal to its predecessor together with the action leading into it."""
    s = traj.states
    if len(s) < 2:
        return traj
    dup = np.all(np.abs(s[1:] - s[:-1]) <= tol, axis=1)
    if not dup.any():
        return traj
    keep = np.concatenate([[True], ~dup])
    return Trajectory(s[keep], traj.actions[~dup], traj.success)


@dataclass
class GcslBatch:
    s: np.ndarray
    a: np.ndarray
    g: np.ndarray
    gap: np.ndarray

    def __len__(self):
        return len(self.s)


@dataclass
class TrailBatch:
    s: np.ndarray
    g: np.ndarray
    m: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.s)


@dataclass
class ReplayBuffer:
    """FIFO ring of whole episodes stored in padded arrays for vectorized sampling."""

    max_states: int
    state_dim: int
    capacity: int = 2000
    action_shape: tuple = ()
    action_dtype: type = np.int64
    trim_tol: float = 0.0
    trim_on_push: bool = True
    size: int = 0
    inserted: int = 0
    skipped: int = 0
    states: np.ndarray = field(init=False, repr=False)
    actions: np.ndarray = field(init=False, repr=False)
    lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.capacity < 1 or self.max_states < 2:
            raise ValueError("capacity must be >= 1 and max_states >= 2")
        self.states = np.zeros((self.capacity, self.max_states, self.state_dim))
        self.actions = np.zeros((self.capacity, self.max_states - 1, *self.action_shape),
                                dtype=self.action_dtype)
        self.lengths = np.zeros(self.capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self.size

    def push(self, traj: Trajectory) -> bool:
        if self.trim_on_push:
            traj = trim(traj, self.trim_tol)
        n = len(traj)
        if n < 2:
            self.skipped += 1
            return False
        if n > self.max_states:
            raise ValueError(f"trajectory of {n} states exceeds buffer max_states={self.max_states}")
        slot = self.inserted % self.capacity
        self.states[slot, :n] = traj.states
        self.actions[slot, :n - 1] = traj.actions
        self.lengths[slot] = n
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)
        return True

    def episode(self, slot: int) -> Trajectory:
        n = self.lengths[slot]
        return Trajectory(self.states[slot, :n].copy(), self.actions[slot, :n - 1].copy())

    def _draw(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        ep = rng.integers(self.size, size=n)
        T = self.lengths[ep]
        i = rng.integers(1, T)
        j = rng.integers(i + 1, T + 1)
        return ep, i, j

    def sample_gcsl(self, n: int, rng: np.random.Generator) -> GcslBatch:
        ep, i, j = self._draw(n, rng)
        return GcslBatch(self.states[ep, i - 1], self.actions[ep, i - 1],
                         self.states[ep, j - 1], j - i)

    def sample_trail(self, n: int, rng: np.random.Generator) -> TrailBatch:
        ep, i, j = self._draw(n, rng)
        k = rng.integers(i, j + 1)
        t = (k - i) / (j - i)
        return TrailBatch(self.states[ep, i - 1], self.states[ep, j - 1],
                          self.states[ep, k - 1], t)

    def sample_pairs(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        ep, i, j = self._draw(n, rng)
        return self.states[ep, i - 1], self.states[ep, j - 1]

    def suffix_length_distribution(self) -> dict[int, float]:
        return suffix_length_distribution(self.lengths[:self.size])


def gap_histogram(buffer: ReplayBuffer, n_samples: int, rng: np.random.Generator,
                  chunk: int = 1 << 18) -> np.ndarray:
    """Empirical distribution of j - i; entry 0 is gap 1, last entry gap max_states - 1."""
    counts = np.zeros(buffer.max_states, dtype=np.int64)
    left = n_samples
    while left > 0:
        n = min(chunk, left)
        _, i, j = buffer._draw(n, rng)
        counts += np.bincount(j - i, minlength=buffer.max_states)
        left -= n
    return counts[1:] / n_samples


def suffix_length_distribution(lengths) -> dict[int, float]:
    """p_k: probability that the sampled start leaves a suffix of k steps.

    Episodes are uniform, and a start index uniform on 1..T-1 leaves k = T - i steps.
    """
    lengths = np.asarray(lengths)
    if len(lengths) == 0:
        return {}
    p: dict[int, float] = {}
    for T in lengths:
        for k in range(1, int(T)):
            p[k] = p.get(k, 0.0) + 1.0 / ((T - 1) * len(lengths))
    return dict(sorted(p.items()))


def analytic_u_k(length_dist: Mapping[int, float], K: int):
    """Probability that a hindsight target is exactly K steps away: sum_{k >= K} p_k / k.

    Exact when the probabilities are Fractions.
    """
    total = Fraction(0) if all(isinstance(v, Fraction) for v in length_dist.values()) else 0.0
    for k, pk in length_dist.items():
        if k >= K:
            total += pk / k
    return total


def write_trajectory_log(path, trajectories) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps({
                "states": traj.states.tolist(),
                "actions": np.asarray(traj.actions).tolist(),
                "success": bool(traj.success),
            }) + "\n")


def read_trajectory_log(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(Trajectory(np.array(rec["states"]), np.array(rec["actions"]), rec["success"]))
    return out
