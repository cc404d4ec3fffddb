"""Adversarial discriminator over (state, item) embeddings and the reward it induces.

Label convention: D(s, a) is the probability that the pair came from the
learning policy. Policy pairs are pushed towards D -> 1 and expert pairs
towards D -> 0, so r_IRL = -log D is large for expert-looking pairs.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .neural import Net, adam_init, adam_step, backward_cache, forward_cache, init_net

EPS_D = 1e-6


@dataclass
class IRLConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    refresh_every: int = 10  # policy rounds between discriminator refreshes
    refresh_steps: int = 50
    batch_size: int = 128
    enabled: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not self.learning_rate > 0:
            raise ConfigError("irl.learning_rate must be > 0")
        if self.refresh_every < 1:
            raise ConfigError("irl.refresh_every must be >= 1")
        if self.refresh_steps < 0:
            raise ConfigError("irl.refresh_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("irl.batch_size must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("irl.hidden sizes must be positive")


@dataclass
class Discriminator:
    net: Net
    train_stats: dict = field(default_factory=lambda: {"last_loss": None, "updates": 0})

    @property
    def input_dim(self):
        return self.net.in_dim


def make_discriminator(input_dim, hidden=(64, 64), seed=0, zero=False):
    return Discriminator(init_net([input_dim, *hidden, 1], "tanh", "linear", seed=seed, zero=zero))


def _softplus(x):
    return np.logaddexp(0.0, x)


def discriminator_logits(disc, x):
    out, _ = forward_cache(disc.net, np.atleast_2d(x))
    return out[:, 0]


def discriminator_prob(disc, state_embedding, action_embedding=None):
    """D(s, a), clamped to [EPS_D, 1 - EPS_D]. Accepts batches."""
    x = np.atleast_2d(state_embedding) if action_embedding is None else \
        np.concatenate([np.atleast_2d(state_embedding), np.atleast_2d(action_embedding)], axis=1)
    if x.shape[1] != disc.input_dim:
        raise UsageError(f"discriminator expects dim {disc.input_dim}, got {x.shape[1]}")
    z = discriminator_logits(disc, x)
    p = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), EPS_D, 1.0 - EPS_D)
    return p if np.ndim(state_embedding) > 1 else float(p[0])


def irl_reward_from_prob(d):
    return -np.log(np.clip(d, EPS_D, 1.0 - EPS_D))


def irl_reward(disc, state_embedding, action_embedding=None):
    return irl_reward_from_prob(discriminator_prob(disc, state_embedding, action_embedding))


def discriminator_loss(net, demo_x, policy_x):
    """Cross-entropy  -E_demo[log(1-D)] - E_policy[log D]  and its parameter gradients."""
    x = np.concatenate([demo_x, policy_x])
    n_d, n_p = len(demo_x), len(policy_x)
    out, cache = forward_cache(net, x)
    z = out[:, 0]
    zd, zp = z[:n_d], z[n_d:]
    # log(1 - sigmoid(z)) = -softplus(z); log sigmoid(z) = -softplus(-z)
    loss = _softplus(zd).mean() + _softplus(-zp).mean()
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    g = np.empty_like(z)
    g[:n_d] = sig[:n_d] / n_d
    g[n_d:] = (sig[n_d:] - 1.0) / n_p
    return float(loss), backward_cache(net, cache, g[:, None])


def train_discriminator(disc, demo_batch, policy_batch, opt):
    """One optimiser step; returns ``(disc, opt, post_step_loss)``."""
    demo_batch = np.atleast_2d(demo_batch)
    policy_batch = np.atleast_2d(policy_batch)
    if len(demo_batch) == 0 or len(policy_batch) == 0:
        raise UsageError("discriminator needs non-empty demo and policy batches")
    _, grads = discriminator_loss(disc.net, demo_batch, policy_batch)
    net, opt = adam_step(disc.net, grads, opt)
    loss, _ = discriminator_loss(net, demo_batch, policy_batch)
    stats = {"last_loss": loss, "updates": disc.train_stats.get("updates", 0) + 1}
    return Discriminator(net, stats), opt, loss


def refresh_discriminator(disc, opt, demo_x, policy_x, steps, batch_size, rng):
    """``steps`` minibatch updates on freshly drawn demo/policy pairs."""
    losses = []
    for _ in range(steps):
        bd = demo_x[rng.integers(0, len(demo_x), min(batch_size, len(demo_x)))]
        bp = policy_x[rng.integers(0, len(policy_x), min(batch_size, len(policy_x)))]
        disc, opt, loss = train_discriminator(disc, bd, bp, opt)
        losses.append(loss)
    return disc, opt, losses


def new_optimizer(disc, learning_rate=1e-3):
    return adam_init(disc.net, learning_rate)
