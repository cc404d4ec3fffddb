"""Demonstration expert: reflector, planner, actor and critic roles over
similarity-gated memories.

All four roles talk to a *provider* through the same request/response
dictionaries. ``ScriptedProvider`` answers them with deterministic
heuristics; ``ExternalProvider`` renders the request into a text prompt, posts
it to an HTTP completion endpoint and parses the JSON completion. Nothing
downstream can tell which one produced a trajectory.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .env import DIVERSITY, Trajectory, Transition, encode_state, step
from .errors import PartialCollectionError, ProviderError, UsageError

ENDPOINT_ENV = "ILREC_PROVIDER_ENDPOINT"
TOKEN_ENV = "ILREC_PROVIDER_TOKEN"


# -- memory ------------------------------------------------------------------------

@dataclass
class MemoryEntry:
    key: np.ndarray
    payload: object
    value: Optional[float] = None


class MemoryStore:
    """FIFO-bounded store of (key embedding, payload, value) entries."""

    def __init__(self, dim, threshold=0.7, capacity=512):
        if not 0.0 <= threshold <= 1.0:
            raise UsageError(f"memory threshold must lie in [0, 1], got {threshold}")
        if capacity < 1:
            raise UsageError("memory capacity must be positive")
        self.dim = dim
        self.threshold = threshold
        self.capacity = capacity
        self._keys = np.zeros((capacity, dim))
        self._entries = [None] * capacity
        self._head = 0  # slot of the oldest entry once full
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, key, payload, value=None):
        key = np.asarray(key, dtype=np.float64)
        if key.shape != (self.dim,):
            raise UsageError(f"memory key dim {key.shape} != {self.dim}")
        slot = (self._head + self._size) % self.capacity
        if self._size == self.capacity:
            slot = self._head
            self._head = (self._head + 1) % self.capacity
        else:
            self._size += 1
        self._keys[slot] = key
        self._entries[slot] = MemoryEntry(key.copy(), payload, value)

    def _order(self):
        return (self._head + np.arange(self._size)) % self.capacity

    @property
    def entries(self):
        return [self._entries[s] for s in self._order()]

    def keys(self):
        return self._keys[self._order()]

    def select(self, mask):
        return [self._entries[s] for s in self._order()[mask]]


def normalized_similarities(keys, query):
    """Cosine similarity to ``query`` min-max scaled to [0, 1] across the store."""
    if len(keys) == 0:
        return np.zeros(0)
    kn = np.sqrt(np.einsum("ij,ij->i", keys, keys))
    qn = np.sqrt(query @ query)
    raw = keys @ query / np.maximum(kn * qn, 1e-12)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def retrieve(memory, query, threshold=None):
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (memory.dim,):
        raise UsageError(f"query dim {query.shape} != {memory.dim}")
    if len(memory) == 0:
        return []
    tau = memory.threshold if threshold is None else threshold
    sims = normalized_similarities(memory.keys(), query)
    return memory.select(sims > tau)


# -- structured role outputs -----------------------------------------------------------

@dataclass
class Reflection:
    payload: dict
    episode_id: int

    def __post_init__(self):
        if not self.payload:
            raise UsageError("reflection payload must be non-empty")


@dataclass
class Guidance:
    categories: list
    payload: str = ""


# -- providers ------------------------------------------------------------------------------

INSTRUCTIONS = {
    "reflector": "Summarise the finished session: which categories earned the best ratings, "
                 "and which category, if any, ended the session by being repeated too often. "
                 "Answer with JSON {\"top_categories\": [...], \"over_recommended\": [...], \"text\": \"...\"}.",
    "planner": "Rank the categories to recommend next for this user. Never list a category that "
               "would reach the repetition limit. Answer with JSON {\"categories\": [...], \"text\": \"...\"}.",
    "actor": "Describe the item to recommend as a direction in item-embedding space. "
             "Answer with JSON {\"indicator\": [...]}.",
    "critic": "Estimate the cumulative future rating of this session state. Answer with JSON {\"value\": x}.",
}


class ScriptedProvider:
    """Deterministic heuristic standing in for a frozen language model.

    ``catalog`` gives it item knowledge. For a hashed ``error_rate`` fraction of
    (last item, best category) situations the planner puts an arbitrary allowed
    category first. The slips are systematic blind spots rather than noise:
    the same situation always produces the same off-target suggestion.
    """

    kind = "scripted"

    def __init__(self, catalog, temperature=0.5, error_rate=0.1, seed=0, memory_weight=0.25,
                 popularity_bias=0.0, judgment_noise=0.0, biased_users=1.0):
        if temperature < 0 or popularity_bias < 0 or judgment_noise < 0:
            raise UsageError("provider temperature, popularity_bias and judgment_noise must be >= 0")
        self.catalog = catalog
        self.temperature = temperature
        self.error_rate = error_rate
        self.seed = seed
        self.memory_weight = memory_weight
        self.popularity_bias = popularity_bias
        self.judgment_noise = judgment_noise
        self.biased_users = biased_users
        c = np.arange(catalog.n_categories)
        # fixed per-category popularity in [0, 1); the planner over-rates popular categories
        self.popularity = K.hash_uniform(seed + 2, c, np.zeros_like(c))

    def respond(self, request):
        return getattr(self, "_" + request["role"])(request)

    def _reflector(self, req):
        cats = np.asarray(req["categories"], dtype=np.int64)
        rewards = np.asarray(req["rewards"], dtype=np.float64)
        means = {int(c): float(rewards[cats == c].mean()) for c in np.unique(cats)}
        top = sorted(means, key=lambda c: (-means[c], c))[:3]
        over = []
        if req["terminated_by"] == DIVERSITY:
            window = cats[-req["window"]:]
            counts = np.bincount(window, minlength=int(cats.max()) + 1)
            over = [int(c) for c in np.flatnonzero(counts >= req["max_same"])]
        text = f"best categories {top}; over-recommended {over}" if over else f"best categories {top}"
        return {"top_categories": top, "over_recommended": over, "text": text}

    def _planner(self, req):
        aff = np.asarray(req["category_affinity"], dtype=np.float64)
        if self.popularity_bias > 0 and \
                K.hash_uniform(self.seed + 4, np.array([req["user_id"]]), np.zeros(1, np.int64))[0] < self.biased_users:
            aff = aff + self.popularity_bias * self.popularity[:len(aff)]
        if self.judgment_noise > 0:
            c = np.arange(len(aff))
            u = K.hash_uniform(self.seed + 3, np.full_like(c, req["user_id"] * 1024 + req["step"]), c)
            aff = aff + self.judgment_noise * (2.0 * u - 1.0)
        counts = np.asarray(req["category_counts"], dtype=np.float64)
        flagged = set()
        for r in req["reflections"]:
            flagged.update(int(c) for c in r.get("over_recommended", []))
        order = sorted(range(len(aff)), key=lambda c: (c in flagged, -aff[c], c))
        allowed = [c for c in order if counts[c] < req["max_same"] - 1]
        if not allowed:
            allowed = [int(np.argmin(counts))]
        if len(allowed) > 1 and self.error_rate > 0:
            # keyed on the situation, not the call, so the same context yields the same slip
            key = (np.array([req.get("last_item", -1) + 1]), np.array([allowed[0]]))
            if K.hash_uniform(self.seed, *key)[0] < self.error_rate:
                pick = 1 + int(K.hash_uniform(self.seed + 1, *key)[0] * (len(allowed) - 1))
                allowed.insert(0, allowed.pop(pick))
        return {"categories": allowed, "text": f"prefer categories {allowed[:3]}"}

    def _actor(self, req):
        target = int(req["categories"][0])
        members = self.catalog.members(target)
        scores = np.asarray(req["item_scores"], dtype=np.float64)[members]
        emb = self.catalog.embeddings[members]
        if self.temperature > 0:
            z = (scores - scores.max()) / self.temperature
            w = np.exp(z) / np.exp(z).sum()
        else:
            w = (scores == scores.max()).astype(np.float64)
            w /= w.sum()
        indicator = w @ emb
        recalled = [int(a) for a in req["recalled_items"] if int(self.catalog.categories[int(a)]) == target]
        if recalled and self.memory_weight > 0:
            indicator = indicator + self.memory_weight * self.catalog.embeddings[recalled].mean(axis=0)
        if not np.any(indicator):
            indicator = emb.mean(axis=0) if np.any(emb.mean(axis=0)) else emb[0]
        return {"indicator": indicator.tolist()}

    def _critic(self, req):
        vals = req["retrieved_values"]
        if vals:
            return {"value": float(np.mean(vals))}
        return {"value": 3.0 * float(req["remaining_horizon"])}


class ExternalProvider:
    """Completion-endpoint client: one POST per request, JSON completions."""

    kind = "external"

    def __init__(self, endpoint=None, token=None, temperature=0.5, timeout=30.0, retries=2):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise UsageError(f"external provider needs an endpoint (config or ${ENDPOINT_ENV})")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.temperature = temperature
        self.timeout = timeout
        self.retries = retries

    @staticmethod
    def render_prompt(request):
        return INSTRUCTIONS[request["role"]] + "\n\nINPUT:\n" + json.dumps(request, sort_keys=True)

    def _post(self, body):
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(body).encode(), headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode())

    def respond(self, request):
        body = {"prompt": self.render_prompt(request), "temperature": self.temperature}
        last = None
        for attempt in range(self.retries + 1):
            try:
                completion = self._post(body)["completion"]
                return json.loads(completion)
            except (urllib.error.URLError, OSError, KeyError, ValueError, TypeError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(0.05 * (attempt + 1))
        raise ProviderError(f"{request['role']} request failed: {last}", retries=self.retries)


def parse_prompt(prompt):
    """Recover the structured request from a rendered prompt (server-side helper)."""
    return json.loads(prompt.split("INPUT:\n", 1)[1])


# -- roles --------------------------------------------------------------------------------

@dataclass
class ExpertConfig:
    tau_planner: float = 0.7
    tau_actor: float = 0.7
    tau_critic: float = 0.7
    capacity: int = 512
    error_rate: float = 0.1
    popularity_bias: float = 3.0
    judgment_noise: float = 0.0
    biased_users: float = 0.5
    temperature: float = 0.5
    gamma: float = 0.9
    memory_weight: float = 0.25
    provider: str = "scripted"
    endpoint: Optional[str] = None
    seed: int = 0


class Expert:
    """Bundle of the four roles, their memories, and the provider they share."""

    def __init__(self, catalog, tracker, rule, provider, config=None, affinity_fn=None):
        self.catalog = catalog
        self.tracker = tracker
        self.rule = rule
        self.provider = provider
        self.config = config or ExpertConfig()
        c = self.config
        d = tracker.d_state
        self.planner_memory = MemoryStore(d, c.tau_planner, c.capacity)
        self.actor_memory = MemoryStore(d, c.tau_actor, c.capacity)
        self.critic_memory = MemoryStore(d, c.tau_critic, c.capacity)
        self.affinity_fn = affinity_fn
        self.instructions = dict(INSTRUCTIONS)
        self._score_cache = (None, None)

    def item_scores(self, state):
        if self.affinity_fn is None:
            raise UsageError("expert has no affinity source; pass affinity_fn or a world model")
        if self._score_cache[0] is not state:
            self._score_cache = (state, np.asarray(self.affinity_fn(state), dtype=np.float64))
        return self._score_cache[1]

    def category_counts(self, state):
        """Counts over the interactions that stay in the termination window after one more step."""
        keep = self.rule.window - 1
        cats = np.asarray(state.categories[max(0, len(state.categories) - keep):] if keep > 0 else (), dtype=np.int64)
        return np.bincount(cats, minlength=self.catalog.n_categories).astype(np.float64)


def reflect(expert, episode, episode_id=0, instructions=None):
    """Summarise a finished episode and append the reflection to planner memory."""
    if not episode.transitions or not episode.transitions[-1].done:
        raise UsageError("reflect needs a completed episode")
    cats = [expert.tracker.categories[t.action] for t in episode.transitions]
    req = {"role": "reflector", "categories": [int(c) for c in cats],
           "rewards": [float(t.reward) for t in episode.transitions],
           "terminated_by": episode.terminated_by, "window": expert.rule.window,
           "max_same": expert.rule.max_same,
           "instructions": instructions or expert.instructions["reflector"]}
    out = expert.provider.respond(req)
    refl = Reflection(out, episode_id)
    expert.planner_memory.add(episode.transitions[0].state.encoding, refl.payload)
    return refl


def plan(expert, state, instructions=None):
    recalled = retrieve(expert.planner_memory, state.encoding)
    scores = expert.item_scores(state)
    aff = expert.catalog.category_means(scores)
    req = {"role": "planner", "user_id": int(state.user_id), "step": int(state.step_index),
           "last_item": int(state.items[-1]) if state.items else -1,
           "category_affinity": aff.tolist(), "category_counts": expert.category_counts(state).tolist(),
           "max_same": expert.rule.max_same, "window": expert.rule.window,
           "reflections": [e.payload for e in recalled],
           "instructions": instructions or expert.instructions["planner"]}
    out = expert.provider.respond(req)
    cats = [int(c) for c in out["categories"]]
    if not cats or any(not 0 <= c < expert.catalog.n_categories for c in cats):
        raise ProviderError(f"planner returned invalid categories {cats}")
    return Guidance(cats, out.get("text", ""))


def act(expert, state, guidance, instructions=None):
    recalled = retrieve(expert.actor_memory, state.encoding)
    req = {"role": "actor", "categories": list(guidance.categories),
           "item_scores": expert.item_scores(state).tolist(),
           "recalled_items": [int(e.payload) for e in recalled],
           "instructions": instructions or expert.instructions["actor"]}
    out = expert.provider.respond(req)
    indicator = np.asarray(out["indicator"], dtype=np.float64)
    if indicator.shape != (expert.catalog.d_item,) or not np.all(np.isfinite(indicator)) or not np.any(indicator):
        raise ProviderError("actor returned an invalid indicator")
    return indicator


def select_item(indicator, catalog):
    """Item with the highest cosine similarity to ``indicator`` (lowest id on ties)."""
    indicator = np.asarray(indicator, dtype=np.float64)
    if len(catalog) == 0:
        raise UsageError("empty catalog")
    if not np.any(indicator):
        raise UsageError("indicator must be non-zero")
    emb = catalog.embeddings if hasattr(catalog, "embeddings") else np.asarray(catalog)
    return int(K.cosine_argmax(indicator[None], emb)[0])


def critic_value(expert, state, instructions=None):
    recalled = retrieve(expert.critic_memory, state.encoding)
    req = {"role": "critic", "retrieved_values": [float(e.value) for e in recalled],
           "remaining_horizon": int(expert.rule.length_cap - state.step_index),
           "instructions": instructions or expert.instructions["critic"]}
    return float(expert.provider.respond(req)["value"])


def expert_advantage(reward, v_next, v_now, gamma, done=False):
    """One-step advantage r + gamma * V(s') - V(s)."""
    if not all(np.isfinite(x) for x in (reward, v_next, v_now)):
        raise UsageError("advantage inputs must be finite")
    return float(reward + (0.0 if done else gamma * v_next) - v_now)


# -- demonstrations -----------------------------------------------------------------------

@dataclass
class DemoSet:
    trajectories: list
    embeddings: np.ndarray  # (n_transitions, d_state + d_item)
    expert_advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if any(len(t) == 0 for t in self.trajectories):
            raise UsageError("demonstration trajectories must be non-empty")
        if len(self.embeddings) != self.n_transitions:
            raise UsageError("embedding count must equal transition count")

    @property
    def transitions(self):
        return [t for tr in self.trajectories for t in tr.transitions]

    @property
    def n_transitions(self):
        return sum(len(t) for t in self.trajectories)

    def __len__(self):
        return len(self.trajectories)

    def arrays(self):
        """Flat arrays: states, actions, rewards, next states, dones, trajectory index."""
        tr = self.transitions
        if not tr:
            return None
        idx = np.concatenate([np.full(len(t), k) for k, t in enumerate(self.trajectories)])
        return (np.stack([t.state.encoding for t in tr]), np.array([t.action for t in tr], dtype=np.int64),
                np.array([t.reward for t in tr]), np.stack([t.next_state.encoding for t in tr]),
                np.array([t.done for t in tr]), idx)


def run_expert_episode(expert, user, world_model, episode_id):
    g = expert.config.gamma
    state = encode_state([], user, expert.tracker)
    transitions, advantages = [], []
    v_now = critic_value(expert, state)
    why = None
    while True:
        guidance = plan(expert, state)
        indicator = act(expert, state, guidance)
        action = select_item(indicator, expert.catalog)
        nxt, reward, done, why = step(state, action, world_model, expert.rule)
        v_next = 0.0 if done else critic_value(expert, nxt)
        advantages.append(expert_advantage(reward, v_next, v_now, g, done))
        expert.actor_memory.add(state.encoding, action, reward)
        expert.critic_memory.add(state.encoding, None, reward + g * v_next)
        transitions.append(Transition(state, action, reward, nxt, done))
        if done:
            break
        state, v_now = nxt, v_next
    traj = Trajectory(user, transitions, why)
    reflect(expert, traj, episode_id)
    return traj, advantages


def collect_demonstrations(world_model, expert, users, seed=0):
    """One expert trajectory per user, run in user order inside the world model."""
    del seed  # the scripted provider carries its own seed; kept for signature symmetry
    trajs, advs, done_users = [], [], []
    for k, user in enumerate(users):
        try:
            traj, a = run_expert_episode(expert, user, world_model, k)
        except ProviderError as exc:
            raise PartialCollectionError(str(exc), done_users, getattr(exc, "retries", 0)) from exc
        trajs.append(traj)
        advs.extend(a)
        done_users.append(user.id)
    emb = demo_embeddings(trajs, expert.tracker)
    return DemoSet(trajs, emb, np.asarray(advs, dtype=np.float64))


def demo_embeddings(trajectories, tracker):
    rows = [np.concatenate([t.state.encoding, tracker.embeddings[t.action]])
            for tr in trajectories for t in tr.transitions]
    return np.stack(rows) if rows else np.zeros((0, tracker.d_state + tracker.d_item))


def make_provider(config, catalog):
    if config.provider == "scripted":
        return ScriptedProvider(catalog, config.temperature, config.error_rate, config.seed, config.memory_weight,
                                config.popularity_bias, config.judgment_noise, config.biased_users)
    if config.provider == "external":
        return ExternalProvider(config.endpoint, temperature=config.temperature)
    raise UsageError(f"unknown provider kind {config.provider!r}")


def build_expert(catalog, world_model, rule, config=None, provider=None):
    config = config or ExpertConfig()
    provider = provider or make_provider(config, catalog)
    return Expert(catalog, world_model.tracker, rule, provider, config, affinity_fn=lambda s: world_model.predict_all(s.encoding))
