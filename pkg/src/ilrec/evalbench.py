"""Evaluation protocol, ablation suite and hyperparameter sweeps.

Policies are graded in the ground-truth simulator on users never seen during
training. Per-episode means are kept as exact rationals so that
``sum == mean * length`` holds without floating-point slack.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .env import Simulator, TerminationRule, WorldModelEnv, sample_users, step_noise_seed
from .errors import ConfigError, UsageError

EVAL_ID_OFFSET = 1_000_000  # evaluation users never share ids with training users

VARIANTS = ("no_irl_baseline", "no_w", "no_w_env", "no_w_irl", "full")  # row order of the ablation table
SWEEP_PARAMS = {
    "beta": "weighting.beta",
    "alpha": "weighting.alpha",
    "alpha_ent": "policy.alpha_ent",
    "lambda_imit": "policy.lambda_imit",
}
DEFAULT_GRIDS = {
    "beta": (0.1, 1.0, 10.0),
    "alpha": (0.25, 0.5, 0.75),
    "alpha_ent": (0.01, 0.1, 0.2),
    "lambda_imit": (0.1, 0.5, 2.0),
}


@dataclass
class EvalProtocol:
    rule: TerminationRule = field(default_factory=TerminationRule)
    n_episodes: int = 100
    greedy: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError("evalbench.n_episodes must be >= 1")


@dataclass
class EpisodeRecord:
    episode: int
    user_id: int
    length: int
    r_sum: float
    r_mean_exact: Fraction
    terminated_by: Optional[str] = None

    @property
    def r_mean(self):
        return float(self.r_mean_exact)

    def as_row(self):
        return {"episode": self.episode, "user_id": self.user_id, "length": self.length, "r_sum": self.r_sum,
                "r_each": self.r_mean, "terminated_by": self.terminated_by}


def episode_record(episode, user_id, rewards, terminated_by=None):
    rewards = [float(x) for x in rewards]
    if not rewards:
        raise UsageError("an episode has at least one step")
    total = math.fsum(rewards)
    return EpisodeRecord(episode, user_id, len(rewards), total, Fraction(total) / len(rewards), terminated_by)


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class Metrics:
    len_mean: float
    len_std: float
    r_each_mean: float
    r_each_std: float
    r_traj_mean: float
    r_traj_std: float
    episodes: list

    @classmethod
    def from_episodes(cls, episodes):
        if not episodes:
            raise UsageError("no episodes to aggregate")
        lm, ls = _mean_std([e.length for e in episodes])
        em, es = _mean_std([e.r_mean for e in episodes])
        tm, ts = _mean_std([e.r_sum for e in episodes])
        return cls(lm, ls, em, es, tm, ts, list(episodes))

    @classmethod
    def from_rewards(cls, reward_lists, user_ids=None):
        user_ids = user_ids if user_ids is not None else range(len(reward_lists))
        return cls.from_episodes([episode_record(k, int(u), r) for k, (u, r) in enumerate(zip(user_ids, reward_lists))])

    def identities_hold(self):
        """Every episode satisfies sum == mean * length in exact arithmetic."""
        return all(Fraction(e.r_sum) == e.r_mean_exact * e.length for e in self.episodes)

    def summary(self):
        return {"len_mean": self.len_mean, "len_std": self.len_std, "r_each_mean": self.r_each_mean,
                "r_each_std": self.r_each_std, "r_traj_mean": self.r_traj_mean, "r_traj_std": self.r_traj_std,
                "n_episodes": len(self.episodes)}

    def table(self):
        return [e.as_row() for e in self.episodes]


# -- agents ---------------------------------------------------------------------------

def _chooser(agent, greedy, rng):
    from .expert import Expert, act, plan, select_item
    from .policy import PolicyBundle

    if isinstance(agent, PolicyBundle):
        return lambda batch, rows: agent.act(batch.encodings(rows), greedy=greedy, rng=rng)
    if isinstance(agent, Expert):
        def choose(batch, rows):
            out = []
            for r in rows:
                s = batch.state_vector(r)
                out.append(select_item(act(agent, s, plan(agent, s)), agent.catalog))
            return out
        return choose
    if callable(agent):
        return agent
    raise UsageError(f"cannot evaluate an agent of type {type(agent).__name__}")


def eval_users(catalog, protocol):
    return sample_users(catalog, protocol.n_episodes, seed=protocol.seed, id_offset=EVAL_ID_OFFSET)


def evaluate(agent, env, protocol=None, users=None):
    """Run one session per user to termination and aggregate Len / R_each / R_traj.

    ``env`` is a ``Simulator`` (the default grading environment) or a
    ``WorldModelEnv``. ``agent`` is a ``PolicyBundle``, an ``Expert`` or a
    ``choose(batch, rows) -> actions`` callable.
    """
    protocol = protocol or EvalProtocol()
    if users is None:
        if not isinstance(env, Simulator):
            raise UsageError("pass users explicitly when evaluating inside a world model")
        users = eval_users(env.catalog, protocol)
    users = list(users)[:protocol.n_episodes]
    if env.rule != protocol.rule:
        env = copy.copy(env)
        env.rule = protocol.rule
    rng = np.random.default_rng([protocol.seed, 61])
    choose = _chooser(agent, protocol.greedy, rng)
    batch = env.reset(users)
    rewards = [[] for _ in users]
    t = 0
    while True:
        rows = batch.active
        if rows.size == 0:
            break
        actions = np.asarray(choose(batch, rows), dtype=np.int64)
        if isinstance(env, WorldModelEnv):
            r, _ = env.step(batch, rows, actions)
        else:
            seeds = [step_noise_seed(protocol.seed, int(row), t) for row in rows]
            r, _ = env.step(batch, rows, actions, seeds)
        for row, value in zip(rows, r):
            rewards[row].append(float(value))
        t += 1
    episodes = [episode_record(k, u.id, rewards[k], batch.terminated_by[k]) for k, u in enumerate(users)]
    return Metrics.from_episodes(episodes)


# -- ablations and sweeps -------------------------------------------------------------------

def variant_config(base, variant):
    """Config for one ablation variant. The variant owns alpha and the weighting switch."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    cfg = copy.deepcopy(base)
    cfg.variant = variant
    if variant == "no_w":
        cfg.policy.weight_mode = "uniform"
    elif variant == "no_w_env":
        cfg.weighting.alpha = 0.0
    elif variant == "no_w_irl":
        cfg.weighting.alpha = 1.0
    return cfg


def check_variant(cfg):
    """Reject configs whose explicit settings contradict their variant."""
    v = getattr(cfg, "variant", "full")
    if v not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {v!r}")
    if v == "no_w_env" and cfg.weighting.alpha != 0.0:
        raise ConfigError("weighting.alpha must be 0 for variant no_w_env (the variant owns alpha)")
    if v == "no_w_irl" and cfg.weighting.alpha != 1.0:
        raise ConfigError("weighting.alpha must be 1 for variant no_w_irl (the variant owns alpha)")
    if v == "no_w" and cfg.policy.weight_mode != "uniform":
        raise ConfigError("policy.weight_mode must be 'uniform' for variant no_w")


def run_ablation(base, variants=VARIANTS, seeds=None, cache=None):
    """Train and evaluate each variant on shared seeds; returns {variant: [Metrics per seed]}.

    Data stages (catalog, log, world model, demonstrations) depend only on the
    seed, so they are built once per seed and shared by every variant.
    """
    from .pipeline import Pipeline

    seeds = list(seeds if seeds is not None else base.evalbench.seeds)
    for v in variants:
        check_variant(variant_config(base, v))
    out = {v: [] for v in variants}
    for seed in seeds:
        shared = None
        for v in variants:
            cfg = variant_config(base, v)
            cfg.seed = seed
            pipe = Pipeline(cfg, shared=shared)
            out[v].append(pipe.evaluate_variant())
            shared = pipe.shared_stages()
    return out


def sweep(base, param, grid=None, seeds=None):
    """One train+evaluate per grid value and seed; returns (rows, series)."""
    from .config import set_path
    from .pipeline import Pipeline

    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {tuple(SWEEP_PARAMS)}")
    grid = list(DEFAULT_GRIDS[param] if grid is None else grid)
    if not grid:
        raise ConfigError("sweep grid must be non-empty")
    seeds = list(seeds if seeds is not None else base.evalbench.seeds)
    rows = []
    shared = {}
    for value in grid:
        for seed in seeds:
            cfg = copy.deepcopy(base)
            set_path(cfg, SWEEP_PARAMS[param], float(value))
            cfg.seed = seed
            pipe = Pipeline(cfg, shared=shared.get(seed))
            m = pipe.evaluate_variant()
            shared[seed] = pipe.shared_stages()
            rows.append({"param": param, "value": float(value), "seed": seed, **m.summary()})
    return rows, series(rows, param, grid)


def series(rows, param, grid):
    """Plot-ready (x, mean, std) of R_traj across seeds for each grid value."""
    out = []
    for value in grid:
        vals = [r["r_traj_mean"] for r in rows if r["param"] == param and r["value"] == float(value)]
        m, s = _mean_std(vals)
        out.append({"x": float(value), "mean": m, "std": s})
    return out


def ablation_rows(results):
    rows = []
    for v in VARIANTS:
        for k, m in enumerate(results.get(v, [])):
            rows.append({"variant": v, "seed_index": k, **m.summary()})
    return rows


def ordering_counts(results, better="full", worse=("no_w", "no_w_env")):
    """Number of seeds on which ``better`` beats each of ``worse`` in R_traj."""
    counts = {}
    for w in worse:
        pairs = zip(results[better], results[w])
        counts[w] = sum(a.r_traj_mean > b.r_traj_mean for a, b in pairs)
    return counts


# -- output -----------------------------------------------------------------------

def write_csv(path, rows):
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    keys = list(rows[0].keys())
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


def write_jsonl(path, rows):
    path = Path(path)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path
