"""Command-line entry point: ``trailrl {train,eval,bc,bias,ablate}``.

Configs are flat text files of dotted ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .envs import GoalEnv, read_queries, write_queries
from .gcsl import Policy
from .nn import CheckpointError
from .replay import ReplayBuffer
from .runner import (BC_VARIANTS, AblationConfig, BcConfig, TrainConfig, audit_report, evaluate,
                     fixed_length_corpus, histogram_rows, run_ablation, run_bc,
                     run_bias_analysis, run_training, summarize, write_csv, HISTOGRAM_HEADER)
from .trail import TrailLossConfig, TrajectoryEncoder

log = logging.getLogger("trailrl")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(item):
    return lambda text: [item(v.strip()) for v in text.split(",") if v.strip()]


def _opt_float(text: str):
    return None if text.lower() in ("none", "") else float(text)


SCHEMA = {
    "env.name": str,
    "env.seed": int,
    "env.rooms_x": int,
    "env.rooms_y": int,
    "env.room_size": int,
    "env.horizon": int,
    "env.noise_sigma": float,
    "env.turns": int,
    "env.size": int,
    "train.episodes": int,
    "train.updates_per_step": int,
    "train.batch_size": int,
    "train.lr": float,
    "train.buffer_capacity": int,
    "train.collector": str,
    "train.trim": _bool,
    "train.trim_tol": float,
    "train.hidden": _list(int),
    "train.dtype": str,
    "train.grad_clip": _opt_float,
    "train.seeds": _list(int),
    "policy.k": int,
    "trail.enabled": _bool,
    "trail.k": int,
    "trail.alpha_edge": float,
    "trail.alpha_sc": float,
    "eval.every": int,
    "eval.queries": int,
    "eval.query_seed": int,
    "eval.seed": int,
    "eval.mode": str,
    "bc.variants": _list(str),
    "bc.n_train": int,
    "bc.n_test": int,
    "bc.batches": int,
    "bias.episodes": int,
    "bias.samples": int,
    "ablate.axis": str,
    "ablate.episodes": int,
}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed values, rejecting unknown or repeated keys."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = SCHEMA[key](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    return out


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def _env_params(cfg: dict) -> dict:
    return {k[4:]: v for k, v in cfg.items() if k.startswith("env.") and k != "env.name"}


def _trail_cfg(cfg: dict) -> TrailLossConfig:
    base = TrailLossConfig()
    return TrailLossConfig(cfg.get("trail.alpha_edge", base.alpha_edge),
                           cfg.get("trail.alpha_sc", base.alpha_sc), cfg.get("trail.k", base.K))


def train_config(cfg: dict) -> TrainConfig:
    keys = {
        "train.episodes": "episodes", "train.updates_per_step": "updates_per_step",
        "train.batch_size": "batch_size", "train.lr": "lr",
        "train.buffer_capacity": "buffer_capacity", "train.collector": "collector",
        "train.trim": "trim", "train.trim_tol": "trim_tol", "train.hidden": "hidden",
        "train.dtype": "dtype", "train.grad_clip": "grad_clip", "train.seeds": "seeds",
        "policy.k": "policy_K", "trail.enabled": "trail_enabled", "eval.every": "eval_every",
        "eval.queries": "n_eval_queries", "eval.query_seed": "query_seed", "eval.seed": "eval_seed",
    }
    kwargs = {field: cfg[key] for key, field in keys.items() if key in cfg}
    try:
        tc = TrainConfig(env_name=cfg.get("env.name", "discrete_rooms"),
                         env_params=_env_params(cfg), trail=_trail_cfg(cfg), **kwargs)
        tc.make_env()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    return tc


def bc_config(cfg: dict) -> BcConfig:
    kwargs = {}
    for key, field in (("bc.n_train", "n_train"), ("bc.n_test", "n_test"),
                       ("bc.batches", "n_batches"), ("train.batch_size", "batch_size"),
                       ("train.lr", "lr"), ("train.hidden", "hidden"), ("train.dtype", "dtype")):
        if key in cfg:
            kwargs[field] = cfg[key]
    if "train.seeds" in cfg:
        kwargs["seeds"] = cfg["train.seeds"]
    try:
        return BcConfig(env_name=cfg.get("env.name", "large_rooms"), env_params=_env_params(cfg),
                        trail=_trail_cfg(cfg), **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config_path: str
    config_text: str
    config: dict
    seeds: list
    out_dir: str
    build: str
    started: str
    finished: str | None = None

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _start(command: str, args, cfg: dict, seeds) -> tuple[Path, RunManifest]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = RunManifest(command, str(args.config), Path(args.config).read_text(), cfg, list(seeds),
                    str(out), build_id(), _now())
    m.write(out)
    return out, m


def _finish(out: Path, m: RunManifest) -> None:
    m.finished = _now()
    m.write(out)


def _seeds(args, default) -> list:
    return [args.seed] if args.seed is not None else list(default)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg)
    seeds = _seeds(args, tc.seeds)
    out, manifest = _start("train", args, cfg, seeds)

    def on_row(row):
        log.info("episode %d  env_steps %d  success gcsl %.3f  trail %.3f", row[0], row[1],
                 row[-2], row[-1])

    res = run_training(tc, out, seeds, on_row=on_row)
    for mode, rates in res["rates"].items():
        if rates:
            mean, std = summarize(rates)
            print(f"{mode}: success {mean:.3f} +- {std:.3f} over {len(rates)} seed(s)")
    _finish(out, manifest)
    return 0


def _check_dims(what: str, state_dim: int, env: GoalEnv) -> None:
    if state_dim != env.spec.state_dim:
        raise ValueError(f"{what} expects state_dim {state_dim} but the environment has "
                         f"state_dim {env.spec.state_dim}")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg)
    mode = args.mode or cfg.get("eval.mode", "gcsl")
    if mode == "trail" and not args.encoder:
        raise ValueError("mode=trail needs --encoder")
    env = tc.make_env()
    policy = Policy.load(args.policy)
    _check_dims("policy checkpoint", policy.state_dim, env)
    if policy.action_space != env.spec.action_space:
        raise ValueError(f"policy action space {policy.action_space} does not match environment "
                         f"action space {env.spec.action_space}")
    enc = None
    if args.encoder:
        enc = TrajectoryEncoder.load(args.encoder)
        _check_dims("encoder checkpoint", enc.state_dim, env)
    if args.queries:
        queries = read_queries(args.queries)
        for q in queries:
            env.validate_state(q.start)
            env.validate_state(q.goal)
    else:
        queries = env.sample_queries(tc.n_eval_queries, tc.query_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.queries:
        write_queries(out / "queries.csv", queries)
    rep = evaluate(policy, enc, env, queries, mode, tc.eval_seed)
    audit_report(env, rep, queries)
    write_csv(out / "per_query.csv", ["id", "success", "length"],
              [(int(i), int(s), int(L)) for i, s, L in zip(rep.query_ids, rep.success, rep.lengths)])
    zeros = np.zeros(env.spec.horizon, dtype=np.int64)
    h = rep.histogram()
    write_csv(out / "histogram.csv", HISTOGRAM_HEADER,
              histogram_rows(h if mode == "gcsl" else zeros, h if mode == "trail" else zeros))
    print(f"success_rate {rep.success_rate:.17g}")
    return 0


def cmd_bc(args) -> int:
    cfg = load_config(args.config)
    bc = bc_config(cfg)
    variants = cfg.get("bc.variants", list(BC_VARIANTS))
    seeds = _seeds(args, bc.seeds)
    out, manifest = _start("bc", args, cfg, seeds)
    per_seed = []
    for seed in seeds:
        acc = run_bc(bc, seed, variants,
                     progress=lambda what, b: log.info("seed %d %s batch %d", seed, what, b))
        log.info("seed %d: %s", seed, acc)
        per_seed.append(acc)
    rows = [[v, *summarize([a[v] for a in per_seed]), *[a[v] for a in per_seed]] for v in variants]
    write_csv(out / "bc.csv", ["variant", "mean", "std", *[f"seed_{s}" for s in seeds]], rows)
    for r in rows:
        print(f"{r[0]}: accuracy {r[1]:.3f} +- {r[2]:.3f}")
    _finish(out, manifest)
    return 0


def cmd_bias(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg)
    seed = args.seed if args.seed is not None else tc.seeds[0]
    out, manifest = _start("bias", args, cfg, [seed])
    env = tc.make_env()
    rng = np.random.default_rng(seed)
    corpus = fixed_length_corpus(env, cfg.get("bias.episodes", 200), rng)
    buf = ReplayBuffer(max_states=env.spec.horizon + 1, state_dim=env.spec.state_dim,
                       capacity=len(corpus), action_shape=np.asarray(corpus[0].actions).shape[1:],
                       action_dtype=np.asarray(corpus[0].actions).dtype, trim_on_push=False)
    for t in corpus:
        buf.push(t)
    rows = run_bias_analysis(buf, out / "bias.csv", cfg.get("bias.samples", 1_000_000), rng)
    print(f"wrote {len(rows)} gap bins to {out / 'bias.csv'}")
    _finish(out, manifest)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg)
    seeds = _seeds(args, tc.seeds)
    ab = AblationConfig(tc, cfg.get("ablate.axis", "K"), cfg.get("ablate.episodes", 500))
    ab.grid()  # validates the axis before any work
    policy = Policy.load(args.policy)
    out, manifest = _start("ablate", args, cfg, seeds)
    rows = run_ablation(policy, ab, seeds)
    write_csv(out / "ablation.csv", ["setting", "mean", "std", *[f"seed_{s}" for s in seeds]], rows)
    for r in rows:
        print(f"{r[0]}: success {r[1]:.3f} +- {r[2]:.3f}")
    _finish(out, manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trailrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="flat key = value config file")
        sp.add_argument("--out", required=True, help="output directory (files are overwritten)")
        if seed:
            sp.add_argument("--seed", type=int, help="run only this seed (overrides train.seeds)")

    common(sub.add_parser("train", help="collect and train, then write metrics and checkpoints"))
    ev = sub.add_parser("eval", help="greedy rollouts of saved checkpoints on frozen queries")
    common(ev, seed=False)
    ev.add_argument("--policy", required=True)
    ev.add_argument("--encoder")
    ev.add_argument("--queries", help="query CSV; sampled from eval.query_seed when omitted")
    ev.add_argument("--mode", choices=("gcsl", "trail"))
    common(sub.add_parser("bc", help="behavioral cloning accuracy table"))
    common(sub.add_parser("bias", help="hindsight gap histogram vs the closed form"))
    ab = sub.add_parser("ablate", help="encoder K or regularizer sweep against a frozen policy")
    common(ab)
    ab.add_argument("--policy", required=True)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bc": cmd_bc, "bias": cmd_bias,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError, OSError) as e:
        print(f"trailrl {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
