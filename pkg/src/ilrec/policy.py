"""Actor, critics, mixed replay and the training loop.

The actor is a softmax over the whole catalog. Both the actor and the action
critic score every item at once: an MLP maps the state to a vector that is
dotted with fixed item features (embedding, category one-hot, bias), so what
is learned about one item transfers to its neighbours. Expectations under the
policy are therefore exact sums rather than sampled estimates. The state
critic V tracks E_pi Q and a hard-synced copy of it provides bootstrap targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import irl as irl_mod
from .env import WorldModelEnv
from .errors import ConfigError, NumericError, UsageError
from .neural import (Net, adam_init, adam_step, backward_cache, forward, forward_cache, init_net,
                     log_softmax, softmax)
from .weighting import WeightConfig, compute_advantages, demo_returns, fit_value_net, ValueFitConfig, \
    weigh_demonstrations

log = logging.getLogger(__name__)

REWARD_SOURCES = ("world_model", "irl", "mix")


@dataclass
class TrainConfig:
    lambda_imit: float = 0.5
    alpha_ent: float = 0.01
    gamma_discount: float = 0.9
    batch_size: int = 128
    rounds: int = 200
    rollout_episodes: int = 8
    critic_updates: int = 40
    policy_updates: int = 40
    sync_interval: int = 100
    mix_ratio: float = 0.5
    env_capacity: int = 20000
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    reward_source: str = "world_model"
    reward_scale: float = 0.1  # multiplies critic rewards; sets RL gradient scale against imitation
    weighted_replay: bool = True
    weighted_imitation: bool = True
    use_rl: bool = True
    weight_mode: str = "full"  # "full" or "uniform"
    eval_every: int = 50  # rounds between greedy world-model snapshots; 0 disables
    eval_users: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lambda_imit < 0 or self.alpha_ent < 0:
            raise ConfigError("policy.lambda_imit and policy.alpha_ent must be >= 0")
        if not 0 <= self.gamma_discount < 1:
            raise ConfigError("policy.gamma_discount must lie in [0, 1)")
        if not 0 <= self.mix_ratio <= 1:
            raise ConfigError("policy.mix_ratio must lie in [0, 1]")
        self.hidden = tuple(self.hidden)
        for name in ("batch_size", "rollout_episodes", "sync_interval", "env_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"policy.{name} must be positive")
        for name in ("rounds", "critic_updates", "policy_updates", "eval_every", "eval_users"):
            if getattr(self, name) < 0:
                raise ConfigError(f"policy.{name} must be >= 0")
        if not self.reward_scale > 0:
            raise ConfigError("policy.reward_scale must be > 0")
        if self.reward_source not in REWARD_SOURCES:
            raise ConfigError(f"policy.reward_source must be one of {REWARD_SOURCES}")
        if self.weight_mode not in ("full", "uniform"):
            raise ConfigError("policy.weight_mode must be 'full' or 'uniform'")


# -- networks -----------------------------------------------------------------------

def item_features(embeddings, categories, n_categories):
    """Fixed per-item features: embedding, category one-hot and a constant."""
    n = len(categories)
    onehot = np.zeros((n, n_categories))
    onehot[np.arange(n), categories] = 1.0
    return np.concatenate([embeddings, onehot, np.ones((n, 1))], axis=1)


@dataclass
class ItemScorer:
    """scores(s) = (mlp(s) + s @ W) @ features.T; one score per catalog item.

    ``net`` packs the deep MLP parameters followed by the wide linear map W, so
    one optimiser state covers both paths.
    """

    net: Net  # deep part; its params list carries W as the final entry
    features: np.ndarray

    @property
    def deep(self):
        return Net(self.net.layer_dims, self.net.params[:-1], self.net.activation, self.net.output_head)

    @property
    def wide(self):
        return self.net.params[-1]

    def hidden(self, states):
        states = np.atleast_2d(states)
        return forward(self.deep, states) + states @ self.wide

    def scores(self, states):
        return self.hidden(states) @ self.features.T

    def scores_cache(self, states):
        states = np.atleast_2d(states)
        out, cache = forward_cache(self.deep, states)
        return (out + states @ self.wide) @ self.features.T, (cache, states)

    def backward(self, cache, grad_scores):
        cache, states = cache
        g = grad_scores @ self.features
        return backward_cache(self.deep, cache, g) + [states.T @ g]

    def with_net(self, net):
        return ItemScorer(net, self.features)

    def copy(self):
        return ItemScorer(self.net.copy(), self.features)


def make_scorer(d_state, hidden, features, seed):
    deep = init_net([d_state, *hidden, features.shape[1]], "tanh", "linear", seed=seed)
    deep.params.append(np.zeros((d_state, features.shape[1])))
    return ItemScorer(deep, features)

@dataclass
class PolicyBundle:
    actor: ItemScorer
    q: ItemScorer
    v: Net
    v_target: Net
    opt_actor: object
    opt_q: object
    opt_v: object
    discriminator: Optional[irl_mod.Discriminator] = None
    opt_disc: object = None
    critic_steps: int = 0

    def probs(self, states):
        return softmax(self.actor.scores(states))

    def act(self, states, greedy=True, rng=None):
        p = self.probs(states)
        if greedy:
            return np.argmax(p, axis=1)
        u = rng.random(len(p))[:, None]
        return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)

    def nets(self):
        out = {"actor": self.actor.net, "q": self.q.net, "v": self.v, "v_target": self.v_target}
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator.net
        return out


def make_bundle(tracker, config=None, irl_config=None):
    config = config or TrainConfig()
    irl_config = irl_config or irl_mod.IRLConfig()
    s = config.seed
    h = list(config.hidden)
    lr = config.learning_rate
    feats = item_features(tracker.embeddings, tracker.categories, tracker.n_categories)
    d_state = tracker.d_state
    actor = make_scorer(d_state, h, feats, [s, 101])
    q = make_scorer(d_state, h, feats, [s, 102])
    v = init_net([d_state, *h, 1], "tanh", "linear", seed=[s, 103])
    disc = irl_mod.make_discriminator(d_state + tracker.d_item, irl_config.hidden, seed=[s, 104])
    return PolicyBundle(actor, q, v, v.copy(), adam_init(actor.net, lr), adam_init(q.net, lr), adam_init(v, lr),
                        disc, irl_mod.new_optimizer(disc, irl_config.learning_rate))


# -- losses -------------------------------------------------------------------------

def imitation_loss(actor, states, actions, weights):
    """-mean(w * log pi(a|s)) with gradients; zero for an empty batch."""
    if len(actions) == 0:
        return 0.0, [np.zeros_like(p) for p in actor.net.params]
    logits, cache = actor.scores_cache(states)
    g, loss = _imitation_logit_grad(logits, np.asarray(actions), np.asarray(weights, dtype=np.float64))
    return loss, actor.backward(cache, g)


def _imitation_logit_grad(logits, actions, weights):
    n = len(actions)
    lp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-(weights * lp[rows, actions]).mean())
    g = softmax(logits)
    g[rows, actions] -= 1.0
    return g * (weights / n)[:, None], loss


def _rl_logit_grad(logits, q_values, alpha_ent):
    n = len(logits)
    p = softmax(logits)
    lp = log_softmax(logits)
    f = -q_values + alpha_ent * lp  # d/dp of the per-state objective, up to a constant
    loss = float(((p * f).sum(axis=1)).mean())
    g = p * (f - (p * f).sum(axis=1, keepdims=True)) / n
    return g, loss


def rl_loss(actor, q_net, states, alpha_ent):
    """-mean_s[ E_{a~pi} Q(s,a) - alpha_ent * H(pi(.|s)) ], exact expectation."""
    q_values = q_net.scores(states)
    logits, cache = actor.scores_cache(states)
    g, loss = _rl_logit_grad(logits, q_values, alpha_ent)
    return loss, actor.backward(cache, g)


def policy_loss(actor, q_values, states, demo_mask, actions, weights, lambda_imit, alpha_ent, use_rl=True):
    """Total actor objective lambda * L_imit + L_RL on one batch; returns (components, grads)."""
    logits, cache = actor.scores_cache(states)
    g = np.zeros_like(logits)
    l_imit = l_rl = 0.0
    idx = np.flatnonzero(demo_mask)
    if lambda_imit > 0 and idx.size:
        gi, l_imit = _imitation_logit_grad(logits[idx], actions[idx], weights[idx])
        g[idx] += lambda_imit * gi
    if use_rl:
        gr, l_rl = _rl_logit_grad(logits, q_values, alpha_ent)
        g += gr
    total = lambda_imit * l_imit + l_rl
    return {"imit": l_imit, "rl": l_rl, "total": total}, actor.backward(cache, g)


def td_targets(rewards, next_values, dones, gamma):
    return rewards + gamma * (1.0 - dones) * next_values


def critic_loss(q_net, states, actions, targets, weights):
    out, cache = q_net.scores_cache(states)
    n = len(actions)
    rows = np.arange(n)
    err = out[rows, actions] - targets
    loss = float((weights * err ** 2).mean())
    g = np.zeros_like(out)
    g[rows, actions] = 2.0 * weights * err / n
    return loss, q_net.backward(cache, g)


def value_loss(v_net, states, targets):
    out, cache = forward_cache(v_net, states)
    err = out[:, 0] - targets
    return float((err ** 2).mean()), backward_cache(v_net, cache, (2.0 * err / len(err))[:, None])


def critic_update(bundle, batch, gamma_discount, sync_interval=100):
    """One TD step for Q, one regression step for V, periodic hard sync of the target."""
    if len(batch["actions"]) == 0:
        raise UsageError("critic update needs a non-empty batch")
    s, a, r, s2, d = batch["states"], batch["actions"], batch["rewards"], batch["next_states"], batch["dones"]
    w = batch.get("critic_weights", np.ones(len(a)))
    y = td_targets(r, forward(bundle.v_target, s2)[:, 0], d, gamma_discount)
    q_loss, gq = critic_loss(bundle.q, s, a, y, w)
    q_net, bundle.opt_q = adam_step(bundle.q.net, gq, bundle.opt_q)
    bundle.q = bundle.q.with_net(q_net)
    v_target = (bundle.probs(s) * bundle.q.scores(s)).sum(axis=1)
    v_loss, gv = value_loss(bundle.v, s, v_target)
    bundle.v, bundle.opt_v = adam_step(bundle.v, gv, bundle.opt_v)
    bundle.critic_steps += 1
    if bundle.critic_steps % sync_interval == 0:
        bundle.v_target = bundle.v.copy()
    return {"q": q_loss, "v": v_loss}


def policy_update(bundle, batch, config):
    q_values = bundle.q.scores(batch["states"])
    losses, grads = policy_loss(bundle.actor, q_values, batch["states"], batch["is_demo"], batch["actions"],
                                batch["imit_weights"], config.lambda_imit, config.alpha_ent, config.use_rl)
    if not np.isfinite(losses["total"]):
        raise NumericError(f"non-finite policy loss {losses}")
    actor_net, bundle.opt_actor = adam_step(bundle.actor.net, grads, bundle.opt_actor)
    bundle.actor = bundle.actor.with_net(actor_net)
    return losses


# -- replay -------------------------------------------------------------------------

class EnvBuffer:
    """Ring buffer of recent policy rollout transitions."""

    def __init__(self, d_state, capacity):
        self.capacity = capacity
        self.s = np.zeros((capacity, d_state))
        self.s2 = np.zeros((capacity, d_state))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.d = np.zeros(capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, d):
        for k in range(len(a)):
            i = self.ptr
            self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s[k], a[k], r[k], s2[k], d[k]
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)


@dataclass
class DemoBuffer:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    d: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.a)


@dataclass
class ReplayBuffers:
    env: EnvBuffer
    demo: DemoBuffer
    mix_ratio: float = 0.5


def weighted_indices(weights, n, rng):
    """Draw ``n`` indices with probability proportional to ``weights``."""
    cdf = np.cumsum(weights, dtype=np.float64)
    if cdf[-1] <= 0:
        return rng.integers(0, len(weights), n)
    return np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(weights) - 1)


def sample_mixed_batch(buffers, batch_size, mix_ratio, rng, prioritized=True):
    """Mixed batch with per-row source tags. Demo rows follow weight-proportional priority."""
    n_env_avail, n_demo_avail = len(buffers.env), len(buffers.demo)
    if n_env_avail == 0 and n_demo_avail == 0:
        raise UsageError("both replay buffers are empty")
    if n_demo_avail == 0 and mix_ratio > 0:
        log.warning("demo buffer empty; sampling environment transitions only")
        mix_ratio = 0.0
    elif n_env_avail == 0 and mix_ratio < 1:
        log.warning("environment buffer empty; sampling demonstrations only")
        mix_ratio = 1.0
    n_demo = int(rng.binomial(batch_size, mix_ratio)) if 0 < mix_ratio < 1 else int(round(mix_ratio * batch_size))
    n_env = batch_size - n_demo
    e = buffers.env
    dm = buffers.demo
    ei = rng.integers(0, n_env_avail, n_env) if n_env else np.zeros(0, dtype=np.int64)
    di = (weighted_indices(dm.weights, n_demo, rng) if prioritized else rng.integers(0, n_demo_avail, n_demo)) \
        if n_demo else np.zeros(0, dtype=np.int64)
    cat = lambda a, b: np.concatenate([a, b])  # noqa: E731
    return {
        "states": cat(e.s[ei], dm.s[di]) if n_demo_avail else e.s[ei],
        "actions": cat(e.a[ei], dm.a[di]) if n_demo_avail else e.a[ei],
        "rewards": cat(e.r[ei], dm.r[di]) if n_demo_avail else e.r[ei],
        "next_states": cat(e.s2[ei], dm.s2[di]) if n_demo_avail else e.s2[ei],
        "dones": cat(e.d[ei], dm.d[di]) if n_demo_avail else e.d[ei],
        "is_demo": np.concatenate([np.zeros(n_env, dtype=bool), np.ones(n_demo, dtype=bool)]),
        "weights": cat(np.ones(n_env), dm.weights[di]) if n_demo_avail else np.ones(n_env),
        "demo_index": di,
    }


# -- rollouts -------------------------------------------------------------------------

def rollout(bundle, wm_env, users, rng, greedy=False):
    """Roll the actor out in the world model; returns flat transition arrays and episode stats."""
    batch = wm_env.reset(users)
    S, A, R, S2, D = [], [], [], [], []
    ep_return = np.zeros(len(users))
    while True:
        rows = batch.active
        if rows.size == 0:
            break
        s = batch.encodings(rows).copy()
        a = bundle.act(s, greedy=greedy, rng=rng)
        r, done = wm_env.step(batch, rows, a)
        S.append(s)
        A.append(a)
        R.append(r)
        S2.append(batch.encodings(rows).copy())
        D.append(done.astype(np.float64))
        ep_return[rows] += r
    return (np.concatenate(S), np.concatenate(A), np.concatenate(R), np.concatenate(S2), np.concatenate(D)), \
        {"mean_return": float(ep_return.mean()), "mean_length": float(batch.lengths.mean())}


def _pair_embeddings(states, actions, item_emb):
    return np.concatenate([states, item_emb[actions]], axis=1)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: PolicyBundle
    metrics: list
    weighted: object = None
    value_demo: Optional[Net] = None


def train(world_model, rule, users, demo, config=None, weight_config=None, value_config=None, irl_config=None,
          callback=None):
    """Demonstration weighting followed by alternating rollout / critic / actor / discriminator rounds.

    ``callback(round, bundle, row)`` runs after every round (evaluation
    snapshots hook in here). A non-finite loss raises ``NumericError`` with
    the offending bundle attached as ``exc.snapshot``.
    """
    config = config or TrainConfig()
    irl_config = irl_config or irl_mod.IRLConfig()
    weight_config = weight_config or WeightConfig(gamma_discount=config.gamma_discount)
    tracker = world_model.tracker
    item_emb = tracker.embeddings
    bundle = make_bundle(tracker, config, irl_config)
    if config.rounds == 0:
        return TrainResult(bundle, [])
    rng = np.random.default_rng([config.seed, 201])
    wm_env = WorldModelEnv(world_model, rule)

    # phase (ii): demonstration weighting
    s, a, r, s2, d, _ = demo.arrays()
    demo_pairs = _pair_embeddings(s, a, item_emb)
    value_config = value_config or ValueFitConfig(seed=config.seed, learning_rate=config.learning_rate)
    v_demo, _ = fit_value_net(s, demo_returns(demo, weight_config.gamma_discount), value_config)
    advantages = compute_advantages(demo, world_model, v_demo, weight_config.gamma_discount)

    def sample_users(k):
        return [users[i] for i in rng.integers(0, len(users), k)]

    def refresh():
        nonlocal bundle
        (ps, pa, *_), _ = rollout(bundle, wm_env, sample_users(config.rollout_episodes), rng)
        pol_pairs = _pair_embeddings(ps, pa, item_emb)
        if irl_config.enabled:
            bundle.discriminator, bundle.opt_disc, _ = irl_mod.refresh_discriminator(
                bundle.discriminator, bundle.opt_disc, demo_pairs, pol_pairs, irl_config.refresh_steps,
                irl_config.batch_size, rng)
        d_demo = irl_mod.discriminator_prob(bundle.discriminator, demo_pairs)
        d_pol = irl_mod.discriminator_prob(bundle.discriminator, pol_pairs)
        if not irl_config.enabled:
            d_demo = np.full(len(demo_pairs), 0.5)
        weighted = weigh_demonstrations(demo, advantages, d_demo, weight_config, config.weight_mode)
        return weighted, float(np.mean(d_demo)), float(np.mean(d_pol))

    weighted, d_demo_mean, d_pol_mean = refresh()

    def critic_rewards(states, actions, base):
        if config.reward_source == "world_model":
            out = base
        else:
            r_irl = irl_mod.irl_reward(bundle.discriminator, _pair_embeddings(states, actions, item_emb))
            out = r_irl if config.reward_source == "irl" else base + r_irl
        return config.reward_scale * out

    buffers = ReplayBuffers(EnvBuffer(tracker.d_state, config.env_capacity),
                            DemoBuffer(s, a, critic_rewards(s, a, r), s2, d.astype(np.float64),
                                       weighted.weights.copy()),
                            config.mix_ratio)

    snapshot_users = list(users[:config.eval_users])
    metrics = []
    for rnd in range(config.rounds):
        # phase (iii): policy optimisation
        (ps, pa, pr, ps2, pd), roll = rollout(bundle, wm_env, sample_users(config.rollout_episodes), rng)
        buffers.env.add(ps, pa, critic_rewards(ps, pa, pr), ps2, pd)

        c_losses, p_losses = [], []
        for _ in range(config.critic_updates):
            b = sample_mixed_batch(buffers, config.batch_size, config.mix_ratio, rng, config.weighted_replay)
            b["critic_weights"] = b["weights"]
            c_losses.append(critic_update(bundle, b, config.gamma_discount, config.sync_interval))
        for _ in range(config.policy_updates):
            b = sample_mixed_batch(buffers, config.batch_size, config.mix_ratio, rng, config.weighted_replay)
            b["imit_weights"] = b["weights"] if config.weighted_imitation else np.ones(len(b["actions"]))
            p_losses.append(policy_update(bundle, b, config))

        if irl_config.enabled and (rnd + 1) % irl_config.refresh_every == 0:
            weighted, d_demo_mean, d_pol_mean = refresh()
            buffers.demo.weights = weighted.weights.copy()
            if config.reward_source != "world_model":
                buffers.demo.r = critic_rewards(s, a, r)

        row = {"round": rnd,
               "critic_q": _mean(c_losses, "q"), "critic_v": _mean(c_losses, "v"),
               "imit": _mean(p_losses, "imit"), "rl": _mean(p_losses, "rl"), "total": _mean(p_losses, "total"),
               "d_demo": d_demo_mean, "d_policy": d_pol_mean,
               "rollout_return": roll["mean_return"], "rollout_length": roll["mean_length"]}
        if config.eval_every and snapshot_users and ((rnd + 1) % config.eval_every == 0 or rnd + 1 == config.rounds):
            # greedy acting draws nothing from rng, so snapshots leave training unchanged
            _, snap = rollout(bundle, wm_env, snapshot_users, rng, greedy=True)
            row["eval_return"], row["eval_length"] = snap["mean_return"], snap["mean_length"]
        for k, v in row.items():
            if isinstance(v, float) and not np.isfinite(v):
                exc = NumericError(f"non-finite {k} in round {rnd}: {row}")
                exc.snapshot = bundle
                raise exc
        metrics.append(row)
        if callback is not None:
            callback(rnd, bundle, row)
    return TrainResult(bundle, metrics, weighted, v_demo)


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows])) if rows else 0.0
