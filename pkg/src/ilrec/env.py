"""Synthetic recommendation environment, state tracker and world model.

The ground-truth simulator scores an item with a sigmoid of the user's
(drifting) preference against the item embedding, mapped to [1, 5]. The
world model replaces that score with a learned regressor while keeping the
deterministic state tracker and the category-diversity termination rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DataError, UsageError
from .neural import Net, adam_init, adam_step, backward_cache, forward, forward_cache, init_net

R_MIN, R_MAX = 1.0, 5.0
DIVERSITY = "diversity_rule"
LENGTH_CAP = "length_cap"


# -- catalog and users --------------------------------------------------------

@dataclass(frozen=True)
class Item:
    id: int
    embedding: np.ndarray
    category: int


@dataclass(frozen=True)
class UserProfile:
    id: int
    preference: np.ndarray
    side_features: np.ndarray


@dataclass
class Catalog:
    """Item table stored column-wise; indexing yields ``Item`` views."""

    embeddings: np.ndarray
    categories: np.ndarray
    n_categories: int
    pref_map: np.ndarray  # (d_item, d_side): side features -> preference direction
    pref_noise: float = 0.2

    def __len__(self):
        return self.embeddings.shape[0]

    def __getitem__(self, i):
        return Item(int(i), self.embeddings[i], int(self.categories[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def items(self):
        return list(self)

    @property
    def d_item(self):
        return self.embeddings.shape[1]

    @property
    def d_side(self):
        return self.pref_map.shape[1]

    def members(self, category):
        cache = self.__dict__.setdefault("_members", {})
        if category not in cache:
            cache[category] = np.flatnonzero(self.categories == category)
        return cache[category]

    def category_means(self, scores):
        """Mean of per-item ``scores`` within each category."""
        sums = np.bincount(self.categories, weights=scores, minlength=self.n_categories)
        return sums / np.bincount(self.categories, minlength=self.n_categories)


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def build_synthetic_catalog(seed, n_items, n_categories, d_item, n_users=200, d_side=4,
                            item_spread=0.35, pref_noise=0.2):
    """Category-clustered unit item embeddings plus users whose taste follows their side features."""
    if n_categories < 1 or n_items < n_categories:
        raise ConfigError(f"need n_items >= n_categories >= 1, got {n_items}, {n_categories}")
    if d_item < 2:
        raise ConfigError(f"d_item must be >= 2, got {d_item}")
    if n_users < 0 or d_side < 1:
        raise ConfigError("n_users must be >= 0 and d_side >= 1")
    rng = np.random.default_rng([seed, 0])
    centroids = _unit(rng.normal(size=(n_categories, d_item)))
    categories = rng.permutation(np.arange(n_items) % n_categories)
    emb = _unit(centroids[categories] + item_spread * rng.normal(size=(n_items, d_item)))
    pref_map = rng.normal(size=(d_item, d_side)) / np.sqrt(d_side)
    catalog = Catalog(emb, categories.astype(np.int64), n_categories, pref_map, pref_noise)
    return catalog, sample_users(catalog, n_users, seed=seed)


def sample_users(catalog, n_users, seed, id_offset=0):
    rng = np.random.default_rng([seed, 1, id_offset])
    side = rng.normal(size=(n_users, catalog.d_side))
    pref = _unit(side @ catalog.pref_map.T + catalog.pref_noise * rng.normal(size=(n_users, catalog.d_item)))
    return [UserProfile(id_offset + u, pref[u], side[u]) for u in range(n_users)]


# -- ground-truth reward ----------------------------------------------------------

@dataclass
class SimulatorConfig:
    temperature: float = 0.25
    noise_scale: float = 0.2
    drift: float = 0.02

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("env.temperature must be > 0")
        if self.noise_scale < 0 or not 0 <= self.drift <= 1:
            raise ConfigError("env.noise_scale must be >= 0 and env.drift in [0, 1]")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def reward_batch(prefs, item_emb, user_ids, item_ids, noise_seed, cfg):
    score = np.einsum("ij,ij->i", prefs, item_emb) / cfg.temperature
    noise = cfg.noise_scale * (2.0 * K.hash_uniform(noise_seed, user_ids, item_ids) - 1.0)
    return np.clip(1.0 + 4.0 * _sigmoid(score) + noise, R_MIN, R_MAX)


def true_reward(user, item, noise_seed, cfg=None):
    cfg = cfg or SimulatorConfig()
    return float(reward_batch(user.preference[None], item.embedding[None], np.array([user.id]),
                              np.array([item.id]), noise_seed, cfg)[0])


def step_noise_seed(base_seed, episode, t):
    return (int(base_seed) << 24) + (int(episode) << 8) + int(t)


# -- termination ---------------------------------------------------------------------

@dataclass(frozen=True)
class TerminationRule:
    window: int = 15
    max_same: int = 4
    length_cap: int = 100
    diversity: bool = True  # False keeps only the length cap

    def __post_init__(self):
        if self.window < 1 or self.max_same < 1 or self.max_same > self.window:
            raise ConfigError(f"termination rule needs 1 <= M <= N, got M={self.max_same}, N={self.window}")
        if self.length_cap <= 0:
            raise ConfigError("length_cap must be positive")


AMAZON_RULE = TerminationRule(window=15, max_same=4)
STEAM_RULE = TerminationRule(window=50, max_same=4)


def check_termination(cat_trace, rule):
    """Termination verdict for a category trace that already includes the latest item."""
    trace = np.asarray(cat_trace, dtype=np.int64)[None, :]
    n = trace.shape[1]
    if n and rule.diversity and K.diversity_hits(trace, np.array([n]), rule.window, rule.max_same)[0]:
        return True, DIVERSITY
    if n >= rule.length_cap:
        return True, LENGTH_CAP
    return False, None


# -- state tracker -------------------------------------------------------------------

@dataclass
class TrackerParams:
    """Fixed aggregator: decayed mean of the last k item embeddings, side features,
    and (optionally) per-category counts scaled by M.

    The counts cover the last N - 1 interactions, i.e. the ones still inside the
    termination window after the next step, so a count of M - 1 marks exactly
    the categories whose next pick ends the session. Those categories are also
    flagged in a second 0/1 block. The last entry is the step index over the
    length cap, which keeps the state Markov under the cap.
    """

    embeddings: np.ndarray
    categories: np.ndarray
    n_categories: int
    d_side: int
    k: int = 10
    decay: float = 0.9
    count_window: int = 14
    count_scale: int = 4
    category_block: bool = True
    horizon: int = 100  # step index is appended as step / horizon; 0 disables

    @property
    def d_item(self):
        return self.embeddings.shape[1]

    @property
    def d_state(self):
        return self.d_item + self.d_side + (2 * self.n_categories if self.category_block else 0) + \
            (1 if self.horizon else 0)

    @classmethod
    def for_catalog(cls, catalog, rule=None, **kw):
        rule = rule or TerminationRule()
        kw.setdefault("count_window", rule.window - 1)
        kw.setdefault("count_scale", rule.max_same)
        kw.setdefault("horizon", rule.length_cap)
        return cls(catalog.embeddings, catalog.categories, catalog.n_categories, catalog.d_side, **kw)

    def encode_batch(self, item_trace, lengths, side):
        """Encodings for rows of right-padded item traces."""
        item_trace = np.asarray(item_trace, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        n = item_trace.shape[0]
        idx = lengths[:, None] - self.k + np.arange(self.k)[None, :]
        hist = item_trace[np.arange(n)[:, None], np.clip(idx, 0, None)] if item_trace.shape[1] else \
            np.zeros((n, self.k), dtype=np.int64)
        ewma = K.ewma_encode(hist, np.minimum(lengths, self.k), self.embeddings, self.decay)
        parts = [ewma, np.asarray(side, dtype=np.float64)]
        if self.category_block:
            cats = self.categories[item_trace] if item_trace.shape[1] else item_trace
            counts = K.window_counts(cats, lengths, self.count_window, self.n_categories)
            parts.append(counts / self.count_scale)
            parts.append((counts >= self.count_scale - 1).astype(np.float64))
        if self.horizon:
            parts.append((lengths / self.horizon)[:, None])
        return np.concatenate(parts, axis=1)


@dataclass
class StateVector:
    encoding: np.ndarray
    history: tuple  # last k item ids, oldest first
    step_index: int
    user_id: int = -1
    side_features: Optional[np.ndarray] = None
    items: tuple = ()  # full item trace of the session
    categories: tuple = ()
    terminal: bool = False


def encode_state(history, user, tracker):
    """State after the user consumed ``history`` (item ids, oldest first)."""
    history = [int(i) for i in history]
    n_items = tracker.embeddings.shape[0]
    for i in history:
        if not 0 <= i < n_items:
            raise DataError(f"unknown item id {i}")
    trace = np.array([history], dtype=np.int64) if history else np.zeros((1, 0), dtype=np.int64)
    enc = tracker.encode_batch(trace, np.array([len(history)]), np.asarray(user.side_features)[None])[0]
    return StateVector(enc, tuple(history[-tracker.k:]), len(history), user.id,
                       np.asarray(user.side_features, dtype=np.float64), tuple(history),
                       tuple(int(tracker.categories[i]) for i in history))


# -- world model -----------------------------------------------------------------------

@dataclass
class WorldModelConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    holdout: float = 0.0


@dataclass
class WorldModel:
    reward_net: Net
    tracker: TrackerParams
    training_stats: dict = field(default_factory=dict)

    def features(self, encodings, actions):
        return np.concatenate([np.atleast_2d(encodings), self.tracker.embeddings[np.atleast_1d(actions)]], axis=1)

    def predict(self, encodings, actions):
        out = forward(self.reward_net, self.features(encodings, actions))[:, 0]
        return np.clip(out, R_MIN, R_MAX)

    def predict_all(self, encoding):
        """r_hat for one state against every item."""
        n = self.tracker.embeddings.shape[0]
        return self.predict(np.repeat(np.atleast_2d(encoding), n, axis=0), np.arange(n))


def log_arrays(log):
    enc = np.stack([t.state.encoding for t in log])
    act = np.array([t.action for t in log], dtype=np.int64)
    rew = np.array([t.reward for t in log], dtype=np.float64)
    return enc, act, rew


def fit_world_model(log, tracker, config=None):
    """Fit r_hat(s, a) by minibatch MSE regression on logged rewards."""
    config = config or WorldModelConfig()
    if len(log) == 0:
        raise DataError("cannot fit a world model on an empty log")
    enc, act, rew = log_arrays(log)
    bad = np.flatnonzero(~(np.isfinite(enc).all(axis=1) & np.isfinite(rew)))
    if bad.size:
        raise DataError(f"non-finite features in log at index {int(bad[0])}")
    rng = np.random.default_rng([config.seed, 11])
    n = len(rew)
    order = rng.permutation(n)
    n_hold = int(round(config.holdout * n))
    hold, train_idx = order[:n_hold], order[n_hold:]
    net = init_net([tracker.d_state + tracker.d_item, *config.hidden, 1], "tanh", "linear", seed=config.seed)
    # start at the mean rating so early epochs fit structure, not the offset
    net.params[-1] = net.params[-1] + rew[train_idx].mean()
    model = WorldModel(net, tracker)
    X = model.features(enc, act)
    opt = adam_init(net, config.learning_rate)
    for _ in range(config.epochs):
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), config.batch_size):
            b = perm[start:start + config.batch_size]
            out, cache = forward_cache(net, X[b])
            grad = 2.0 * (out - rew[b, None]) / len(b)
            net, opt = adam_step(net, backward_cache(net, cache, grad), opt)
    model.reward_net = net
    train_mse = float(np.mean((model.predict(enc[train_idx], act[train_idx]) - rew[train_idx]) ** 2))
    stats = {"train_mse": train_mse, "epochs": config.epochs, "n_train": int(len(train_idx)),
             "target_variance": float(np.var(rew[train_idx]))}
    if n_hold:
        stats["holdout_mse"] = float(np.mean((model.predict(enc[hold], act[hold]) - rew[hold]) ** 2))
    model.training_stats = stats
    return model


# -- transitions and trajectories ----------------------------------------------------

@dataclass
class Transition:
    state: StateVector
    action: int
    reward: float
    next_state: StateVector
    done: bool


@dataclass
class Trajectory:
    user: UserProfile
    transitions: list
    terminated_by: Optional[str] = None

    def __len__(self):
        return len(self.transitions)

    @property
    def rewards(self):
        return np.array([t.reward for t in self.transitions], dtype=np.float64)


def step(state, action, model, rule):
    """Advance one interaction inside the world model."""
    if state.terminal:
        raise UsageError("cannot step a terminal state")
    tracker = model.tracker
    if not 0 <= int(action) < tracker.embeddings.shape[0]:
        raise UsageError(f"invalid action {action}")
    reward = float(model.predict(state.encoding[None], np.array([int(action)]))[0])
    user = UserProfile(state.user_id, np.zeros(tracker.d_item), state.side_features)
    nxt = encode_state(list(state.items) + [int(action)], user, tracker)
    done, why = check_termination(nxt.categories, rule)
    nxt.terminal = done
    return nxt, reward, done, why


# -- batched sessions --------------------------------------------------------------------

class SessionBatch:
    """Lock-step sessions for many users; shared by the simulator and the world model."""

    def __init__(self, tracker, rule, users):
        self.tracker = tracker
        self.rule = rule
        self.users = list(users)
        n = len(self.users)
        self.user_ids = np.array([u.id for u in self.users], dtype=np.int64)
        self.side = np.stack([u.side_features for u in self.users]) if n else np.zeros((0, tracker.d_side))
        self.items = np.zeros((n, rule.length_cap), dtype=np.int64)
        self.cats = np.zeros((n, rule.length_cap), dtype=np.int64)
        self.lengths = np.zeros(n, dtype=np.int64)
        self.done = np.zeros(n, dtype=bool)
        self.terminated_by = [None] * n
        self._enc = tracker.encode_batch(self.items, self.lengths, self.side)

    def __len__(self):
        return len(self.users)

    @property
    def active(self):
        return np.flatnonzero(~self.done)

    def encodings(self, rows=None):
        return self._enc if rows is None else self._enc[rows]

    def state_vector(self, r):
        L = int(self.lengths[r])
        items = tuple(int(i) for i in self.items[r, :L])
        return StateVector(self._enc[r].copy(), items[-self.tracker.k:], L, int(self.user_ids[r]), self.side[r],
                           items, tuple(int(c) for c in self.cats[r, :L]), bool(self.done[r]))

    def push(self, rows, actions):
        """Append ``actions`` for ``rows``; returns the done flags of those rows."""
        rows = np.asarray(rows, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        if np.any(self.done[rows]):
            raise UsageError("cannot step a terminal state")
        L = self.lengths[rows]
        self.items[rows, L] = actions
        self.cats[rows, L] = self.tracker.categories[actions]
        self.lengths[rows] = L + 1
        div = K.diversity_hits(self.cats[rows], self.lengths[rows], self.rule.window, self.rule.max_same)
        if not self.rule.diversity:
            div[:] = False
        cap = self.lengths[rows] >= self.rule.length_cap
        done = div | cap
        for r, d, c in zip(rows, div, cap):
            if d:
                self.terminated_by[r] = DIVERSITY
            elif c:
                self.terminated_by[r] = LENGTH_CAP
        self.done[rows] = done
        self._enc[rows] = self.tracker.encode_batch(self.items[rows], self.lengths[rows], self.side[rows])
        return done


class Simulator:
    """Ground-truth environment: true ratings with preference drift."""

    def __init__(self, catalog, tracker, rule, config=None):
        self.catalog = catalog
        self.tracker = tracker
        self.rule = rule
        self.config = config or SimulatorConfig()

    def reset(self, users):
        batch = SessionBatch(self.tracker, self.rule, users)
        batch.prefs = np.stack([u.preference for u in users]).astype(np.float64) if users else \
            np.zeros((0, self.catalog.d_item))
        return batch

    def rewards_for(self, batch, rows, actions, noise_seeds):
        emb = self.catalog.embeddings[actions]
        out = np.empty(len(rows))
        for j, (r, s) in enumerate(zip(rows, noise_seeds)):
            out[j] = reward_batch(batch.prefs[r][None], emb[j][None], batch.user_ids[r:r + 1],
                                  actions[j:j + 1], s, self.config)[0]
        return out

    def step(self, batch, rows, actions, noise_seeds):
        rows = np.asarray(rows, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        r = self.rewards_for(batch, rows, actions, noise_seeds)
        emb = self.catalog.embeddings[actions]
        batch.prefs[rows] += self.config.drift * (emb - batch.prefs[rows])
        done = batch.push(rows, actions)
        return r, done


class WorldModelEnv:
    """Batched world-model rollouts: r_hat rewards, tracker transitions."""

    def __init__(self, model, rule):
        self.model = model
        self.tracker = model.tracker
        self.rule = rule

    def reset(self, users):
        return SessionBatch(self.tracker, self.rule, users)

    def step(self, batch, rows, actions):
        rows = np.asarray(rows, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        r = self.model.predict(batch.encodings(rows), actions)
        done = batch.push(rows, actions)
        return r, done


# -- offline logs ---------------------------------------------------------------------------

class EpsilonGreedy:
    """Behaviour policy acting on the true (current) preference."""

    def __init__(self, epsilon=0.3):
        self.epsilon = epsilon

    def __call__(self, prefs, catalog, rng):
        greedy = np.argmax(prefs @ catalog.embeddings.T, axis=1)
        explore = rng.random(len(prefs)) < self.epsilon
        rand = rng.integers(0, len(catalog), len(prefs))
        return np.where(explore, rand, greedy)


class UniformRandom:
    def __call__(self, prefs, catalog, rng):
        return rng.integers(0, len(catalog), len(prefs))


def run_sessions(sim, users, choose, noise_base, episode_ids=None):
    """Run simulator sessions to termination; ``choose(batch, rows) -> actions``."""
    batch = sim.reset(users)
    episode_ids = np.arange(len(users)) if episode_ids is None else np.asarray(episode_ids)
    trajs = [Trajectory(u, []) for u in users]
    t = 0
    while True:
        rows = batch.active
        if rows.size == 0:
            break
        before = [batch.state_vector(r) for r in rows]
        actions = np.asarray(choose(batch, rows), dtype=np.int64)
        seeds = [step_noise_seed(noise_base, episode_ids[r], t) for r in rows]
        rewards, done = sim.step(batch, rows, actions, seeds)
        for j, r in enumerate(rows):
            nxt = batch.state_vector(r)
            trajs[r].transitions.append(Transition(before[j], int(actions[j]), float(rewards[j]), nxt, bool(done[j])))
        t += 1
    for r, tr in enumerate(trajs):
        tr.terminated_by = batch.terminated_by[r]
    return trajs


def generate_offline_log(catalog, users, behavior_policy=None, n_episodes=1000, seed=0, rule=None,
                         tracker=None, sim_config=None, max_transitions=None, chunk=256):
    """Logged interactions of a behaviour policy with the ground-truth simulator."""
    if len(catalog) == 0 or not users:
        raise ConfigError("offline log needs a non-empty catalog and user set")
    rule = rule or TerminationRule()
    tracker = tracker or TrackerParams.for_catalog(catalog, rule)
    policy = behavior_policy or EpsilonGreedy()
    sim = Simulator(catalog, tracker, rule, sim_config)
    log = []
    for start in range(0, n_episodes, chunk):
        ep = np.arange(start, min(n_episodes, start + chunk))
        ep_users = [users[e % len(users)] for e in ep]
        rng = np.random.default_rng([seed, 21, start])
        def choose(batch, rows):
            return policy(batch.prefs[rows], catalog, rng)

        for tr in run_sessions(sim, ep_users, choose, noise_base=seed, episode_ids=ep):
            log.extend(tr.transitions)
            if max_transitions is not None and len(log) >= max_transitions:
                return log
    return log


def split_episodes(log):
    """Regroup a flat transition log into per-episode lists."""
    out, cur = [], []
    for t in log:
        cur.append(t)
        if t.done:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out
