"""Stage orchestration: catalog -> offline log -> world model -> demonstrations -> policy -> evaluation.

Each stage is computed lazily from the run config and its seed. Stages can be
seeded from a ``shared`` dict (ablations reuse one seed's data stages across
variants) or loaded from / saved to a run directory (the CLI path).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from . import serialization as io
from .env import (EpsilonGreedy, Simulator, TrackerParams, UniformRandom, WorldModel, build_synthetic_catalog,
                  fit_world_model, generate_offline_log)
from .errors import NumericError, PrerequisiteError, UsageError
from .evalbench import EvalProtocol, evaluate
from .expert import build_expert, collect_demonstrations
from .neural import load_nets, save_nets
from .policy import ItemScorer, PolicyBundle, item_features, train

DATA_SECTIONS = ("env", "world_model", "expert")

ARTIFACTS = {
    "catalog": "catalog.jsonl",
    "log": "log.jsonl",
    "world_model": "world_model.npz",
    "demos": "demos.jsonl",
    "policy": "policy.npz",
    "weights": "weights.jsonl",
    "train_log": "train_metrics.jsonl",
    "metrics": "metrics.json",
    "episodes": "episodes.jsonl",
}


def data_key(cfg):
    """Fingerprint of everything the shared data stages depend on."""
    from .config import to_dict

    d = to_dict(cfg)
    blob = json.dumps({"seed": cfg.seed, **{k: d[k] for k in DATA_SECTIONS}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def bundle_from_nets(nets, tracker):
    feats = item_features(tracker.embeddings, tracker.categories, tracker.n_categories)
    return PolicyBundle(ItemScorer(nets["actor"], feats), ItemScorer(nets["q"], feats), nets["v"],
                        nets["v_target"], None, None, None)


class Pipeline:
    def __init__(self, cfg, shared=None, run_dir=None):
        self.cfg = cfg
        self.run_dir = run_dir
        self._cache = {}
        if shared:
            if shared.get("key") != data_key(cfg):
                raise UsageError("shared stages were built for a different seed or data config")
            self._cache.update({k: v for k, v in shared.items() if k != "key"})

    # -- helpers ----------------------------------------------------------------

    @property
    def rule(self):
        return self.cfg.env.rule()

    @property
    def rollout_rule(self):
        """Rule used inside the world model during policy training."""
        if self.cfg.env.rollout_termination:
            return self.rule
        return dataclasses.replace(self.rule, diversity=False)

    def _path(self, name):
        if self.run_dir is None:
            return None
        return self.run_dir / ARTIFACTS[name]

    def _stored(self, name):
        p = self._path(name)
        return p if p is not None and p.exists() else None

    def _get(self, name, build):
        if name not in self._cache:
            self._cache[name] = build()
        return self._cache[name]

    def require(self, name, needed_by):
        if name in self._cache or self._stored(name):
            return
        raise PrerequisiteError(f"{needed_by} needs {ARTIFACTS[name]} in {self.run_dir}; run the stage that "
                                f"produces it first ({PRODUCERS[name]})")

    # -- stages --------------------------------------------------------------------

    def catalog(self):
        """(catalog, users, tracker)."""
        def build():
            e = self.cfg.env
            if self._stored("catalog"):
                catalog, users = io.read_catalog(self._path("catalog"))
            else:
                catalog, users = build_synthetic_catalog(self.cfg.seed, e.n_items, e.n_categories, e.d_item,
                                                         e.n_users, e.d_side, e.item_spread, e.pref_noise)
            tracker = TrackerParams.for_catalog(catalog, self.rule, k=e.tracker_k, decay=e.tracker_decay)
            return catalog, users, tracker
        return self._get("catalog", build)

    def log(self):
        def build():
            catalog, users, tracker = self.catalog()
            if self._stored("log"):
                return io.read_log(self._path("log"), users, tracker)
            e = self.cfg.env
            behavior = EpsilonGreedy(e.epsilon) if e.behavior == "epsilon_greedy" else UniformRandom()
            return generate_offline_log(catalog, users, behavior, e.log_episodes, self.cfg.seed, self.rule, tracker,
                                        e.simulator(), e.max_transitions)
        return self._get("log", build)

    def world_model(self):
        def build():
            _, _, tracker = self.catalog()
            if self._stored("world_model"):
                return WorldModel(load_nets(self._path("world_model"))["reward"], tracker)
            return fit_world_model(self.log(), tracker, self.cfg.section("world_model"))
        return self._get("world_model", build)

    def demo_users(self):
        _, users, _ = self.catalog()
        return users[:self.cfg.env.demo_users]

    def expert_and_demos(self):
        """The scripted expert after collection (its memories filled) and the demonstration set.

        Collection is deterministic, so a run directory only stores the
        demonstrations; the expert is rebuilt by replaying collection, and the
        replay is checked against the stored file.
        """
        def build():
            catalog, _, _ = self.catalog()
            wm = self.world_model()
            expert = build_expert(catalog, wm, self.rule, self.cfg.section("expert"))
            demo = collect_demonstrations(wm, expert, self.demo_users(), seed=self.cfg.seed)
            if self._stored("demos"):
                _, _, tracker = self.catalog()
                stored = io.read_demos(self._path("demos"), self.demo_users(), tracker)
                if [t.action for t in stored.transitions] != [t.action for t in demo.transitions]:
                    raise UsageError("stored demonstrations differ from a replay of the expert; config changed?")
                demo = stored
            return expert, demo
        return self._get("expert_and_demos", build)

    def demos(self):
        if "demos" not in self._cache and "expert_and_demos" not in self._cache and self._stored("demos"):
            _, _, tracker = self.catalog()
            self._cache["demos"] = io.read_demos(self._path("demos"), self.demo_users(), tracker)
        if "demos" in self._cache:
            return self._cache["demos"]
        return self.expert_and_demos()[1]

    def expert(self):
        return self.expert_and_demos()[0]

    def train(self, callback=None):
        def build():
            cfg = self.cfg
            _, users, _ = self.catalog()
            pol = cfg.section("policy")
            wcfg = cfg.section("weighting")
            vcfg = cfg.section("value")
            return train(self.world_model(), self.rollout_rule, users, self.demos(), pol, wcfg, vcfg,
                         cfg.section("irl"), callback)
        return self._get("train", build)

    def bundle(self):
        if "train" not in self._cache and self._stored("policy"):
            _, _, tracker = self.catalog()
            return bundle_from_nets(load_nets(self._path("policy")), tracker)
        return self.train().bundle

    def protocol(self):
        ev = self.cfg.evalbench
        return EvalProtocol(self.rule, ev.n_episodes, ev.greedy, self.cfg.seed)

    def simulator(self):
        catalog, _, tracker = self.catalog()
        return Simulator(catalog, tracker, self.rule, self.cfg.env.simulator())

    def evaluate(self, agent):
        return evaluate(agent, self.simulator(), self.protocol())

    def evaluate_variant(self):
        """Metrics of the configured variant; the no-IRL baseline grades the scripted expert itself."""
        if self.cfg.variant == "no_irl_baseline":
            return self.evaluate(self.expert())
        return self.evaluate(self.bundle())

    def shared_stages(self):
        out = {"key": data_key(self.cfg)}
        for k in ("catalog", "log", "world_model", "expert_and_demos"):
            if k in self._cache:
                out[k] = self._cache[k]
        return out

    # -- persistence ----------------------------------------------------------------

    def save(self, stage):
        """Write the artifacts of one stage into the run directory; returns the paths written."""
        if self.run_dir is None:
            raise UsageError("pipeline has no run directory")
        p = self._path
        if stage == "simulate":
            catalog, users, _ = self.catalog()
            return [io.write_catalog(p("catalog"), catalog, users), io.write_log(p("log"), self.log(), users)]
        if stage == "fit-world-model":
            wm = self.world_model()
            return [save_nets(p("world_model"), {"reward": wm.reward_net})]
        if stage == "collect-demos":
            return [io.write_demos(p("demos"), self.demos())]
        if stage == "train":
            res = self.train()
            out = [save_nets(p("policy"), _checkpoint_nets(res.bundle)), io.write_metrics_log(p("train_log"), res.metrics)]
            if res.weighted is not None:
                out.append(io.write_weights(p("weights"), res.weighted))
            return out
        raise UsageError(f"stage {stage!r} has no artifacts")


def _checkpoint_nets(bundle):
    nets = dict(bundle.nets())
    for name, net in nets.items():
        if not all(np.all(np.isfinite(x)) for x in net.params):
            exc = NumericError(f"non-finite parameters in {name}")
            exc.snapshot = bundle
            raise exc
    return nets


PRODUCERS = {
    "catalog": "ilrec simulate",
    "log": "ilrec simulate",
    "world_model": "ilrec fit-world-model",
    "demos": "ilrec collect-demos",
    "policy": "ilrec train",
    "metrics": "ilrec evaluate",
}

