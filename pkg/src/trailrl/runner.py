"""Training loop, frozen-query evaluation and the offline experiment harnesses."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .envs import GoalEnv, GoalQuery, make_env
from .gcsl import Policy, gcsl_train_step
from .nn import Adam, NonFiniteError
from .replay import ReplayBuffer, Trajectory, analytic_u_k, gap_histogram
from .trail import (TrailLossConfig, TrailRngs, TrajectoryEncoder, get_action, predict_subgoal,
                    trail_train_step)

METRICS_HEADER = ["episode", "env_steps", "gcsl_loss", "trail_sub_loss", "trail_edge_loss",
                  "trail_sc_loss", "eval_success_gcsl", "eval_success_trail"]
HISTOGRAM_HEADER = ["bin_lo", "bin_hi", "count_gcsl", "count_trail"]
MODES = ("gcsl", "trail")
EVAL_CHUNK = 50  # queries per rollout batch; fixed so results do not depend on thread count


def fmt(x) -> str:
    """17 significant digits: floats survive a text round trip exactly."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


class TrainingDiverged(RuntimeError):
    pass


class DataLeakageError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    env_name: str = "discrete_rooms"
    env_params: dict = field(default_factory=dict)
    episodes: int = 2000
    updates_per_step: int = 1
    batch_size: int = 256
    lr: float = 5e-4
    buffer_capacity: int = 2000
    collector: str = "gcsl"
    trail_enabled: bool = True
    trail: TrailLossConfig = field(default_factory=TrailLossConfig)
    policy_K: int = 2
    hidden: tuple = (128, 128)
    dtype: str = "float32"
    grad_clip: float | None = None
    trim: bool = True
    trim_tol: float | None = None  # None: exact for grids, 1e-9 for continuous states
    eval_every: int = 100
    n_eval_queries: int = 100
    query_seed: int = 12345
    eval_seed: int = 777
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if self.collector not in MODES:
            raise ValueError(f"collector must be one of {MODES}, got {self.collector!r}")
        if self.collector == "trail" and not self.trail_enabled:
            raise ValueError("collector=trail requires the encoder (trail.enabled = true)")
        for name in ("updates_per_step", "batch_size", "buffer_capacity", "eval_every",
                     "n_eval_queries", "policy_K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0 or self.lr <= 0:
            raise ValueError("episodes must be >= 0 and lr > 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    def make_env(self) -> GoalEnv:
        return make_env(self.env_name, **self.env_params)


# -- evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    horizon: int
    query_ids: np.ndarray
    success: np.ndarray  # bool per query
    lengths: np.ndarray  # steps to success, -1 on failure
    trajectories: list = field(repr=False, default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self.success) else 0.0

    def histogram(self) -> np.ndarray:
        """Successful episodes per length; entry L - 1 counts length L = 1..horizon."""
        ok = self.lengths[self.success]
        return np.bincount(ok - 1, minlength=self.horizon)[:self.horizon]


def _eval_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("TRAIL_THREADS", "1") or 1)
    return max(1, threads)


def _rollout_chunk(actor: Callable, env: GoalEnv, starts, goals, rng):
    n, d = starts.shape
    T = env.spec.horizon
    space = env.spec.action_space
    continuous = not space.discrete
    tail = (space.dim,) if continuous else ()
    states = np.empty((T + 1, n, d))
    states[0] = starts
    actions: list = []
    s = starts.copy()
    active = np.ones(n, dtype=bool)
    lengths = np.full(n, -1, dtype=np.int64)
    for i in range(T):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        a = np.asarray(actor(s[idx], goals[idx], i))
        if continuous:
            a = env.clip_action(a)
        step_a = np.zeros((n, *tail), dtype=a.dtype)
        step_a[idx] = a
        actions.append(step_a)
        s[idx] = env.transition(s[idx], a, goals[idx], rng)
        states[i + 1] = s
        hit = idx[env.is_success_batch(s[idx], goals[idx])]
        lengths[hit] = i + 1
        active[hit] = False
    trajs = []
    for q in range(n):
        L = lengths[q] if lengths[q] > 0 else len(actions)
        acts = np.array([actions[k][q] for k in range(L)])
        trajs.append(Trajectory(states[:L + 1, q].copy(), acts.reshape(L, *tail),
                                bool(lengths[q] > 0)))
    return lengths, trajs


def evaluate(policy, enc: TrajectoryEncoder | None, env: GoalEnv, queries: Sequence[GoalQuery],
             mode: str = "gcsl", seed: int = 0, threads: int | None = None) -> EvalReport:
    """Greedy rollouts from frozen queries; never touches network weights or buffers."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "trail" and enc is None:
        raise ValueError("trail-mode evaluation needs an encoder")
    T = env.spec.horizon
    if mode == "gcsl":
        actor = lambda s, g, i: policy.act(s, g, None, greedy=True)
    else:
        actor = lambda s, g, i: get_action(policy, enc, s, g, i, T)
    starts = np.array([q.start for q in queries], dtype=np.float64)
    goals = np.array([q.goal for q in queries], dtype=np.float64)
    chunks = [slice(k, k + EVAL_CHUNK) for k in range(0, len(queries), EVAL_CHUNK)]
    seeds = np.random.SeedSequence(seed).spawn(len(chunks))

    def run(c):
        sl, ss = chunks[c], seeds[c]
        return _rollout_chunk(actor, env, starts[sl], goals[sl], np.random.default_rng(ss))

    n_threads = min(_eval_threads(threads), max(1, len(chunks)))
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(run, range(len(chunks))))
    else:
        parts = [run(c) for c in range(len(chunks))]
    lengths = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    trajs = [t for p in parts for t in p[1]]
    return EvalReport(mode, T, np.array([q.id for q in queries]), lengths > 0, lengths, trajs)


def audit_report(env: GoalEnv, report: EvalReport, queries: Sequence[GoalQuery]) -> int:
    """Check every reported success against the environment; returns the number checked.

    Deterministic dynamics are replayed action by action. With actuation noise
    only the final state can be checked.
    """
    noisy = getattr(env, "noise_sigma", 0.0) > 0
    n = 0
    for q, ok, traj in zip(queries, report.success, report.trajectories):
        if not ok:
            continue
        if not np.array_equal(traj.states[0], q.start):
            raise AssertionError(f"query {q.id}: trajectory does not start at the query start")
        if not env.is_success(traj.states[-1], q.goal):
            raise AssertionError(f"query {q.id}: reported success but final state misses the goal")
        if not noisy:
            s = traj.states[0]
            for a, expect in zip(traj.actions, traj.states[1:]):
                s = env.transition(s[None], np.asarray(a)[None], q.goal[None])[0]
                if not np.array_equal(s, expect):
                    raise AssertionError(f"query {q.id}: stored trajectory does not replay")
        n += 1
    return n


def histogram_rows(gcsl_counts, trail_counts):
    return [(L, L + 1, int(a), int(b)) for L, (a, b) in enumerate(zip(gcsl_counts, trail_counts), 1)]


def length_shift(gcsl_counts, trail_counts) -> tuple[int, int]:
    """TraIL-minus-GCSL success counts over the lower and upper half of the length bins."""
    diff = np.asarray(trail_counts, dtype=np.int64) - np.asarray(gcsl_counts, dtype=np.int64)
    half = len(diff) // 2
    return int(diff[:half].sum()), int(diff[half:].sum())


# -- training ---------------------------------------------------------------

def collect_episode(env: GoalEnv, policy: Policy, enc: TrajectoryEncoder | None, collector: str,
                    rng: np.random.Generator, query: GoalQuery | None = None) -> Trajectory:
    """Stochastic rollout from a rho0 reset; stops at the first success."""
    q = env.sample_query(rng) if query is None else query
    s, g = np.array(q.start, dtype=np.float64), np.array(q.goal, dtype=np.float64)
    T = env.spec.horizon
    continuous = not env.spec.action_space.discrete
    states, actions, success = [s], [], False
    for i in range(T):
        if collector == "trail":
            a = get_action(policy, enc, s[None], g[None], i, T, rng, stochastic=True)[0]
        else:
            a = policy.act(s[None], g[None], rng, greedy=False)[0]
        if continuous:
            a = env.clip_action(a)
        s = env.transition(s[None], np.asarray(a)[None], g[None], rng)[0]
        states.append(s)
        actions.append(a)
        if env.is_success(s, g):
            success = True
            break
    shape = (len(actions),) + ((env.spec.action_space.dim,) if continuous else ())
    return Trajectory(np.array(states), np.array(actions).reshape(shape), success)


def make_buffer(env: GoalEnv, capacity: int, max_states: int | None = None, trim: bool = True,
                trim_tol: float | None = None) -> ReplayBuffer:
    space = env.spec.action_space
    if trim_tol is None:
        trim_tol = 0.0 if space.discrete else 1e-9
    return ReplayBuffer(
        max_states=max_states or env.spec.horizon + 1, state_dim=env.spec.state_dim,
        capacity=capacity, action_shape=() if space.discrete else (space.dim,),
        action_dtype=np.int64 if space.discrete else np.float64,
        trim_tol=trim_tol, trim_on_push=trim)


@dataclass
class TrainResult:
    policy: Policy
    encoder: TrajectoryEncoder | None
    metrics: list
    reports: dict  # mode -> EvalReport from the last evaluation
    buffer: ReplayBuffer
    queries: list


class _LossMeter:
    def __init__(self):
        self.sums = np.zeros(4)
        self.counts = np.zeros(4)

    def add(self, idx, value):
        self.sums[idx] += value
        self.counts[idx] += 1

    def flush(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)
        self.sums[:] = 0
        self.counts[:] = 0
        return out


def train(cfg: TrainConfig, seed: int, metrics_path=None, threads: int | None = None,
          on_row: Callable[[list], None] | None = None) -> TrainResult:
    """Interleave collection and optimization for one seed.

    Each collected episode of n steps is followed by n * updates_per_step
    GCSL steps and as many TraIL steps on the shared buffer.
    """
    env = cfg.make_env()
    dtype = np.dtype(cfg.dtype)
    ss_pol, ss_enc, ss_col, ss_gcsl, ss_trail = np.random.SeedSequence(seed).spawn(5)
    policy = Policy(env.spec.state_dim, env.spec.action_space, hidden=cfg.hidden,
                    K=cfg.policy_K, rng=np.random.default_rng(ss_pol), dtype=dtype)
    enc = None
    if cfg.trail_enabled:
        enc = TrajectoryEncoder(env.spec.state_dim, K=cfg.trail.K, hidden=cfg.hidden,
                                rng=np.random.default_rng(ss_enc), dtype=dtype)
    opt_pi = Adam(lr=cfg.lr, clip_norm=cfg.grad_clip)
    opt_enc = Adam(lr=cfg.lr, clip_norm=cfg.grad_clip)
    col_rng = np.random.default_rng(ss_col)
    gcsl_rng = np.random.default_rng(ss_gcsl)
    trail_rngs = TrailRngs.from_seed(ss_trail)
    buffer = make_buffer(env, cfg.buffer_capacity, trim=cfg.trim, trim_tol=cfg.trim_tol)
    queries = env.sample_queries(cfg.n_eval_queries, cfg.query_seed)

    metrics: list = []
    reports: dict = {}
    meter = _LossMeter()
    env_steps = 0
    fh = open(metrics_path, "w", newline="") if metrics_path is not None else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(METRICS_HEADER)
    try:
        for ep in range(1, cfg.episodes + 1):
            traj = collect_episode(env, policy, enc, cfg.collector, col_rng)
            steps = len(traj.actions)
            env_steps += steps
            buffer.push(traj)
            if len(buffer):
                try:
                    for _ in range(steps * cfg.updates_per_step):
                        meter.add(0, gcsl_train_step(
                            policy, buffer.sample_gcsl(cfg.batch_size, gcsl_rng), opt_pi))
                        if enc is not None:
                            l = trail_train_step(enc, buffer, cfg.trail, opt_enc, trail_rngs,
                                                 cfg.batch_size)
                            meter.add(1, l.sub)
                            meter.add(2, l.edge)
                            meter.add(3, l.sc)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"training diverged at episode {ep}: {e}") from e
            if ep % cfg.eval_every == 0 or ep == cfg.episodes:
                reports = {"gcsl": evaluate(policy, None, env, queries, "gcsl", cfg.eval_seed, threads)}
                if enc is not None:
                    reports["trail"] = evaluate(policy, enc, env, queries, "trail",
                                                cfg.eval_seed, threads)
                sr_trail = reports["trail"].success_rate if "trail" in reports else float("nan")
                row = [ep, env_steps, *meter.flush(), reports["gcsl"].success_rate, sr_trail]
                metrics.append(row)
                if writer:
                    writer.writerow([fmt(v) for v in row])
                    fh.flush()
                if on_row:
                    on_row(row)
    finally:
        if fh:
            fh.close()
    return TrainResult(policy, enc, metrics, reports, buffer, queries)


def summarize(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def run_training(cfg: TrainConfig, out_dir, seeds: Sequence[int] | None = None,
                 threads: int | None = None, on_row=None) -> dict:
    """Train every seed, writing per-seed artifacts and an aggregate summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.seeds if seeds is None else seeds)
    rates = {m: [] for m in MODES}
    hist = {m: np.zeros(cfg.make_env().spec.horizon, dtype=np.int64) for m in MODES}
    for seed in seeds:
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        res = train(cfg, seed, sdir / "metrics.csv", threads, on_row)
        res.policy.save(sdir / "policy.ckpt")
        if res.encoder is not None:
            res.encoder.save(sdir / "encoder.ckpt")
        for mode, rep in res.reports.items():
            rates[mode].append(rep.success_rate)
            hist[mode] += rep.histogram()
        if res.reports:
            h_t = res.reports["trail"].histogram() if "trail" in res.reports else np.zeros_like(hist["gcsl"])
            write_csv(sdir / "histogram.csv", HISTOGRAM_HEADER,
                      histogram_rows(res.reports["gcsl"].histogram(), h_t))
    write_csv(out / "histogram.csv", HISTOGRAM_HEADER, histogram_rows(hist["gcsl"], hist["trail"]))
    rows = []
    for mode in MODES:
        if rates[mode]:
            rows.append([mode, *summarize(rates[mode]), *rates[mode]])
    write_csv(out / "summary.csv", ["mode", "mean", "std", *[f"seed_{s}" for s in seeds]], rows)
    return {"rates": rates, "histogram": hist}


# -- behavioral cloning --------------------------------------------------------

BC_VARIANTS = ("gcsl", "trail_t1", "trail_t05", "trail_t05_reg")
BC_DEFAULT_BATCHES = {"double_spiral": 80_000, "large_rooms": 160_000}


@dataclass
class BcConfig:
    env_name: str = "large_rooms"
    env_params: dict = field(default_factory=dict)
    n_train: int = 400
    n_test: int = 300
    n_batches: int | None = None
    batch_size: int = 256
    lr: float = 5e-4
    hidden: tuple = (128, 128)
    dtype: str = "float32"
    trail: TrailLossConfig = field(default_factory=TrailLossConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])

    def __post_init__(self):
        if self.env_name not in BC_DEFAULT_BATCHES:
            raise ValueError(f"behavioral cloning runs on {sorted(BC_DEFAULT_BATCHES)}")
        if self.n_batches is None:
            self.n_batches = BC_DEFAULT_BATCHES[self.env_name]
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class BcDataset:
    train: list  # shortest-path Trajectories
    test_queries: list
    test_labels: np.ndarray  # first action of the reference shortest path

    def check_disjoint(self):
        seen = {_query_key(t.states[0], t.states[-1]) for t in self.train}
        for q in self.test_queries:
            if _query_key(q.start, q.goal) in seen:
                raise DataLeakageError(f"test query {q.id} also appears in the training demos")


def _query_key(s, g):
    return tuple(np.round(np.concatenate([s, g]), 12))


def build_bc_dataset(env, n_train: int, n_test: int, rng: np.random.Generator) -> BcDataset:
    """Distinct (start, goal) queries with planner demos; no query is shared across splits."""
    seen = set()
    queries = []
    while len(queries) < n_train + n_test:
        q = env.sample_query(rng, qid=len(queries))
        key = _query_key(q.start, q.goal)
        if key not in seen:
            seen.add(key)
            queries.append(q)
    demos = [env.shortest_path(q.start, q.goal) for q in queries]
    test = [GoalQuery(q.start, q.goal, i) for i, q in enumerate(queries[n_train:])]
    labels = np.array([int(d.actions[0]) for d in demos[n_train:]])
    ds = BcDataset(demos[:n_train], test, labels)
    ds.check_disjoint()
    return ds


def bc_predict(variant: str, policy: Policy, encoders: dict, s, g) -> np.ndarray:
    if variant == "gcsl":
        return policy.act(s, g, None, greedy=True)
    t = 1.0 if variant == "trail_t1" else 0.5
    enc = encoders["reg" if variant.endswith("_reg") else "plain"]
    return policy.act(s, predict_subgoal(enc, s, g, t), None, greedy=True)


def run_bc(cfg: BcConfig, seed: int, variants: Sequence[str] = BC_VARIANTS,
           progress: Callable[[str, int], None] | None = None) -> dict:
    """Offline training on planner demos; returns test accuracy per variant."""
    for v in variants:
        if v not in BC_VARIANTS:
            raise ValueError(f"unknown BC variant {v!r}")
    env = make_env(cfg.env_name, **cfg.env_params)
    ss_data, ss_pol, ss_batch, ss_plain, ss_reg = np.random.SeedSequence(seed).spawn(5)
    ds = build_bc_dataset(env, cfg.n_train, cfg.n_test, np.random.default_rng(ss_data))
    buf = make_buffer(env, cfg.n_train, max_states=max(len(t) for t in ds.train), trim=False)
    for t in ds.train:
        buf.push(t)
    dtype = np.dtype(cfg.dtype)
    d, space = env.spec.state_dim, env.spec.action_space
    policy = Policy(d, space, hidden=cfg.hidden, rng=np.random.default_rng(ss_pol), dtype=dtype)
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(ss_batch)
    for b in range(cfg.n_batches):
        gcsl_train_step(policy, buf.sample_gcsl(cfg.batch_size, rng), opt)
        if progress and (b + 1) % 10_000 == 0:
            progress("gcsl", b + 1)
    encoders = {}
    needs = {"plain": {"trail_t1", "trail_t05"}, "reg": {"trail_t05_reg"}}
    for name, ss in (("plain", ss_plain), ("reg", ss_reg)):
        if not needs[name] & set(variants):
            continue
        a_e, a_sc = (0.0, 0.0) if name == "plain" else (cfg.trail.alpha_edge, cfg.trail.alpha_sc)
        loss_cfg = TrailLossConfig(a_e, a_sc, cfg.trail.K)
        init_ss, stream_ss = ss.spawn(2)
        enc = TrajectoryEncoder(d, K=cfg.trail.K, hidden=cfg.hidden,
                                rng=np.random.default_rng(init_ss), dtype=dtype)
        opt_e = Adam(lr=cfg.lr)
        rngs = TrailRngs.from_seed(stream_ss)
        for b in range(cfg.n_batches):
            trail_train_step(enc, buf, loss_cfg, opt_e, rngs, cfg.batch_size, report_all=False)
            if progress and (b + 1) % 10_000 == 0:
                progress(f"encoder_{name}", b + 1)
        encoders[name] = enc
    s = np.array([q.start for q in ds.test_queries])
    g = np.array([q.goal for q in ds.test_queries])
    return {v: float(np.mean(bc_predict(v, policy, encoders, s, g) == ds.test_labels))
            for v in variants}


# -- hindsight bias --------------------------------------------------------------

def fixed_length_corpus(env: GoalEnv, n: int, rng: np.random.Generator) -> list[Trajectory]:
    """Uniform-random rollouts that always run the full horizon (no early stop, no trimming)."""
    space = env.spec.action_space
    T = env.spec.horizon
    out = []
    for _ in range(n):
        q = env.sample_query(rng)
        s, g = q.start.astype(np.float64), q.goal.astype(np.float64)
        if space.discrete:
            acts = rng.integers(space.n_actions, size=T)
        else:
            acts = env.clip_action(rng.normal(0.0, space.max_norm, size=(T, space.dim)))
        states = [s]
        for a in acts:
            s = env.transition(s[None], np.asarray(a)[None], g[None], rng)[0]
            states.append(s)
        out.append(Trajectory(np.array(states), acts))
    return out


def run_bias_analysis(buffer: ReplayBuffer, out_path=None, n_samples: int = 1_000_000,
                      rng: np.random.Generator | None = None):
    """Empirical hindsight gap distribution next to the closed form from the stored lengths."""
    rng = np.random.default_rng(0) if rng is None else rng
    emp = gap_histogram(buffer, n_samples, rng)
    p = buffer.suffix_length_distribution()
    max_gap = int(buffer.lengths[:buffer.size].max()) - 1
    rows = [(k, emp[k - 1], analytic_u_k(p, k)) for k in range(1, max_gap + 1)]
    if out_path is not None:
        write_csv(out_path, ["gap", "empirical", "analytic"], rows)
    return rows


# -- ablation --------------------------------------------------------------------

K_GRID = (1, 2, 3, 5, 10)
ALPHA_GRID = tuple((a, b) for a in (0.0, 0.01, 1.0) for b in (0.0, 0.01, 1.0))


@dataclass
class AblationConfig:
    train: TrainConfig
    axis: str = "K"
    episodes: int = 500

    def grid(self) -> list[tuple[str, TrailLossConfig]]:
        base = self.train.trail
        if self.axis == "K":
            return [(f"K={k}", TrailLossConfig(base.alpha_edge, base.alpha_sc, k)) for k in K_GRID]
        if self.axis == "alphas":
            return [(f"alpha_edge={a:g},alpha_sc={b:g}", TrailLossConfig(a, b, base.K))
                    for a, b in ALPHA_GRID]
        raise ValueError(f"ablation axis must be 'K' or 'alphas', got {self.axis!r}")


def run_ablation(policy: Policy, cfg: AblationConfig, seeds: Sequence[int] | None = None,
                 threads: int | None = None) -> list:
    """Fresh encoders trained on the frozen policy's replay stream, scored in trail mode.

    Returns rows (label, mean, std, per-seed rates...).
    """
    tc = cfg.train
    seeds = list(tc.seeds if seeds is None else seeds)
    env = tc.make_env()
    if policy.state_dim != env.spec.state_dim or policy.action_space != env.spec.action_space:
        raise ValueError(f"policy dims (state {policy.state_dim}, {policy.action_space}) do not "
                         f"match env (state {env.spec.state_dim}, {env.spec.action_space})")
    queries = env.sample_queries(tc.n_eval_queries, tc.query_seed)
    streams = {}
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        streams[seed] = [collect_episode(env, policy, None, "gcsl", rng) for _ in range(cfg.episodes)]
    rows = []
    for label, loss_cfg in cfg.grid():
        rates = []
        for seed in seeds:
            ss_init, ss_stream = np.random.SeedSequence([seed, 1]).spawn(2)
            enc = TrajectoryEncoder(env.spec.state_dim, K=loss_cfg.K, hidden=tc.hidden,
                                    rng=np.random.default_rng(ss_init), dtype=np.dtype(tc.dtype))
            opt = Adam(lr=tc.lr, clip_norm=tc.grad_clip)
            rngs = TrailRngs.from_seed(ss_stream)
            buf = make_buffer(env, tc.buffer_capacity, trim=tc.trim, trim_tol=tc.trim_tol)
            for traj in streams[seed]:
                buf.push(traj)
                if len(buf):
                    for _ in range(len(traj.actions) * tc.updates_per_step):
                        trail_train_step(enc, buf, loss_cfg, opt, rngs, tc.batch_size)
            rates.append(evaluate(policy, enc, env, queries, "trail", tc.eval_seed,
                                  threads).success_rate)
        rows.append([label, *summarize(rates), *rates])
    return rows
