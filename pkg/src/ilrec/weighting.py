"""Per-transition weights for demonstration data.

Two signals are fused geometrically: an advantage-based weight from the world
model's reward and a fitted demonstration value function, and a
discriminator-based weight that grows as the discriminator becomes sure a pair
is expert-like. Fused weights are mean-normalised and clipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DataError, UsageError
from .neural import adam_init, adam_step, backward_cache, forward, forward_cache, init_net


@dataclass
class WeightConfig:
    beta: float = 0.1  # per-step advantages on the 1-5 rating scale are small; 1.0 barely separates demos
    gamma_irl: float = 1.0
    alpha: float = 0.5
    gamma_discount: float = 0.9
    clip_range: tuple = (0.1, 10.0)

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("weighting.beta must be > 0")
        if self.gamma_irl < 0:
            raise ConfigError("weighting.gamma_irl must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("weighting.alpha must lie in [0, 1]")
        if not 0.0 <= self.gamma_discount < 1.0:
            raise ConfigError("weighting.gamma_discount must lie in [0, 1)")
        lo, hi = self.clip_range
        if not 0 < lo < hi:
            raise ConfigError("weighting.clip_range must satisfy 0 < low < high")


def returns(rewards, gamma_discount):
    """Discounted reward-to-go, accumulated backwards."""
    rewards = np.asarray(getattr(rewards, "rewards", rewards), dtype=np.float64)
    if rewards.size == 0:
        raise UsageError("returns of an empty trajectory")
    return K.discounted_returns(rewards, gamma_discount)


@dataclass
class ValueFitConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0


def fit_value_demo(demo, gamma_discount, config=None):
    """V_demo: regress each demonstration state's discounted return on its encoding.

    Returns ``(net, final_training_mse)``.
    """
    states = np.stack([t.state.encoding for t in demo.transitions])
    return fit_value_net(states, demo_returns(demo, gamma_discount), config)


def fit_value_net(states, targets, config=None):
    config = config or ValueFitConfig()
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    if len(targets) == 0:
        raise DataError("cannot fit a value net on an empty demo set")
    rng = np.random.default_rng([config.seed, 31])
    net = init_net([states.shape[1], *config.hidden, 1], "tanh", "linear", seed=config.seed + 7)
    # output bias starts at the mean target; the regression then fits deviations
    net.params[-1] = net.params[-1] + targets.mean()
    opt = adam_init(net, config.learning_rate)
    n = len(targets)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            b = perm[start:start + config.batch_size]
            out, cache = forward_cache(net, states[b])
            grad = 2.0 * (out - targets[b, None]) / len(b)
            net, opt = adam_step(net, backward_cache(net, cache, grad), opt)
    mse = float(np.mean((forward(net, states)[:, 0] - targets) ** 2))
    return net, mse


def advantage_demo(reward_hat, next_value, value, gamma_discount, done=False):
    """r_hat(s,a) + gamma * V(s') - V(s), without the bootstrap on terminal steps."""
    reward_hat, next_value, value = (np.asarray(x, dtype=np.float64) for x in (reward_hat, next_value, value))
    if not (np.all(np.isfinite(reward_hat)) and np.all(np.isfinite(next_value)) and np.all(np.isfinite(value))):
        raise UsageError("advantage inputs must be finite")
    boot = np.where(np.asarray(done, dtype=bool), 0.0, gamma_discount * next_value)
    out = reward_hat + boot - value
    return float(out) if out.ndim == 0 else out


def env_weight(advantage, beta):
    return np.exp(np.asarray(advantage, dtype=np.float64) / beta)


def irl_weight(disc_prob, gamma_irl):
    d = np.asarray(disc_prob, dtype=np.float64)
    if np.any((d <= 0) | (d >= 1)):
        raise UsageError("discriminator probabilities must lie strictly inside (0, 1)")
    return (1.0 / d - 1.0) ** gamma_irl


def fuse_weights(w_env, w_irl, alpha):
    w_env = np.asarray(w_env, dtype=np.float64)
    w_irl = np.asarray(w_irl, dtype=np.float64)
    # exact endpoints (avoid 0 ** 0 surprises and rounding in the other factor)
    if alpha == 1.0:
        return w_env.copy()
    if alpha == 0.0:
        return w_irl.copy()
    return w_env ** alpha * w_irl ** (1.0 - alpha)


def normalize_clip(weights, clip_range):
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DataError("weights must be a non-empty array of finite non-negative values")
    mean = w.mean()
    if mean <= 0:
        return np.full_like(w, np.clip(1.0, *clip_range))
    return np.clip(w / mean, clip_range[0], clip_range[1])


@dataclass
class WeightedDemoSet:
    base: object  # expert.DemoSet
    advantage: np.ndarray
    w_env: np.ndarray
    w_irl: np.ndarray
    fused: np.ndarray
    weights: np.ndarray  # normalised and clipped
    config: WeightConfig = field(default_factory=WeightConfig)

    def table(self):
        """Rows for audit export; an overflowed raw weight is written as None."""
        def num(x):
            x = float(x)
            return x if np.isfinite(x) else None

        rows = []
        k = 0
        for ti, tr in enumerate(self.base.trajectories):
            for si in range(len(tr)):
                rows.append({"trajectory": ti, "step": si, "advantage": float(self.advantage[k]),
                             "w_env": num(self.w_env[k]), "w_irl": num(self.w_irl[k]),
                             "w": num(self.fused[k]), "w_tilde": float(self.weights[k])})
                k += 1
        return rows


def demo_returns(demo, gamma_discount):
    return np.concatenate([returns(tr.rewards, gamma_discount) for tr in demo.trajectories])


def compute_advantages(demo, world_model, value_net, gamma_discount):
    s, a, _, s_next, done, _ = demo.arrays()
    r_hat = world_model.predict(s, a)
    v = forward(value_net, s)[:, 0]
    v_next = forward(value_net, s_next)[:, 0]
    return advantage_demo(r_hat, v_next, v, gamma_discount, done)


def weigh_demonstrations(demo, advantages, disc_probs, config, mode="full"):
    """Fuse, normalise and clip. ``mode`` ``"uniform"`` sets every weight to one."""
    with np.errstate(over="ignore"):  # the raw columns are reported as-is, inf included
        w_env = env_weight(advantages, config.beta)
        w_irl = irl_weight(disc_probs, config.gamma_irl)
        fused = fuse_weights(w_env, w_irl, config.alpha)
    if mode == "uniform":
        fused = np.ones_like(fused)
        scaled = fused
    else:
        # normalisation divides by the mean, so any common factor cancels; shifting in log space
        # keeps exp(A / beta) from overflowing at small beta
        log_env = np.asarray(advantages, dtype=np.float64) / config.beta
        log_irl = config.gamma_irl * np.log(1.0 / np.asarray(disc_probs, dtype=np.float64) - 1.0)
        a = config.alpha
        log_w = log_env if a == 1.0 else log_irl if a == 0.0 else a * log_env + (1.0 - a) * log_irl
        scaled = np.exp(log_w - log_w.max())
    return WeightedDemoSet(demo, np.asarray(advantages), w_env, w_irl, fused,
                           normalize_clip(scaled, config.clip_range), config)
