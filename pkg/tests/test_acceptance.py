"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest -v tests/test_acceptance.py``; the lines are
also collected in the terminal summary. Criteria 6 and 7 share one set of
default-config training runs (five seeds), built once per session.
"""

import math
import time

import numpy as np
import pytest

from ilrec.config import load_config
from ilrec.env import (DIVERSITY, LENGTH_CAP, TerminationRule, TrackerParams, WorldModel, build_synthetic_catalog,
                       encode_state, step)
from ilrec.evalbench import Metrics, variant_config
from ilrec.irl import (discriminator_loss, discriminator_prob, irl_reward, make_discriminator, new_optimizer,
                       train_discriminator)
from ilrec.neural import (adam_init, backward_cache, forward, forward_cache, init_net, numeric_grads,
                          relative_error)
from ilrec.pipeline import Pipeline
from ilrec.policy import (PolicyBundle, critic_loss, item_features, make_scorer, policy_loss, value_loss,
                          critic_update)
from ilrec.weighting import env_weight, fuse_weights, irl_weight, normalize_clip, returns

N_SEEDS = 5


# -- 1. gradient integrity ------------------------------------------------------------------

# Softmax scores are shift invariant, so some actor coordinates have an exactly zero gradient; there the
# central difference returns pure roundoff (about 1e-16 * |loss| / step). The denominator floor keeps those
# coordinates from dominating while any absolute gradient error above 1e-10 still fails.
FD_STEP = 1e-4
FD_FLOOR = 1e-6


def _coordinate_mask(net, rng, per_tensor=6):
    masks = []
    for p in net.params:
        m = np.zeros(p.shape, dtype=bool)
        flat = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        m.flat[flat] = True
        masks.append(m)
    return masks


def test_criterion_1_gradient_integrity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    catalog, _ = build_synthetic_catalog(0, 100, 10, 8)
    tracker = TrackerParams.for_catalog(catalog, TerminationRule())
    d, k = tracker.d_state, len(catalog)
    feats = item_features(tracker.embeddings, tracker.categories, tracker.n_categories)
    n = 16
    worst = {}
    for point in range(20):
        s = rng.normal(size=(n, d))
        a = rng.integers(0, k, n)
        w = rng.uniform(0.1, 3.0, n)
        y = rng.normal(size=n)
        actor = make_scorer(d, (64, 64), feats, seed=[point, 1])
        actor.net.params[-1][:] = rng.normal(0, 0.1, actor.net.params[-1].shape)
        q = make_scorer(d, (64, 64), feats, seed=[point, 2])
        q.net.params[-1][:] = rng.normal(0, 0.1, q.net.params[-1].shape)
        q_vals = q.scores(s)
        mask = rng.random(n) < 0.5
        v = init_net([d, 64, 64, 1], seed=[point, 3])
        v_demo = init_net([d, 64, 64, 1], seed=[point, 4])
        disc = make_discriminator(d + catalog.embeddings.shape[1], (64, 64), seed=[point, 5]).net
        r_hat = init_net([d + catalog.embeddings.shape[1], 64, 64, 1], seed=[point, 6])
        pairs_demo, pairs_pol = rng.normal(size=(n, disc.layer_dims[0])), rng.normal(size=(n, disc.layer_dims[0]))
        x_r = rng.normal(size=(n, r_hat.layer_dims[0]))

        def mse(net, x):
            out, cache = forward_cache(net, x)
            err = out[:, 0] - y
            return float((err ** 2).mean()), backward_cache(net, cache, (2 * err / n)[:, None])

        checks = {
            "actor": (actor.net, lambda net: policy_loss(actor.with_net(net), q_vals, s, mask, a, w, 0.5, 0.01)),
            "q_critic": (q.net, lambda net: critic_loss(q.with_net(net), s, a, y, w)),
            "v_critic": (v, lambda net: value_loss(net, s, y)),
            "v_demo": (v_demo, lambda net: mse(net, s)),
            "discriminator": (disc, lambda net: discriminator_loss(net, pairs_demo, pairs_pol)),
            "reward_model": (r_hat, lambda net: mse(net, x_r)),
        }
        for name, (net, fn) in checks.items():
            loss, grads = fn(net)
            scalar = (lambda nt, fn=fn: fn(nt)[0]["total"]) if name == "actor" else (lambda nt, fn=fn: fn(nt)[0])
            num = numeric_grads(net, scalar, eps=FD_STEP, mask=_coordinate_mask(net, rng))
            worst[name] = max(worst.get(name, 0.0), relative_error(grads, num, floor=FD_FLOOR))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max rel err over 20 points: {detail}; {elapsed:.1f}s")


# -- 2. weighting formulas ---------------------------------------------------------------------

def test_criterion_2_weighting_formulas(verdict):
    t0 = time.perf_counter()
    close = lambda a, b: np.allclose(a, b, rtol=0, atol=1e-9)  # noqa: E731
    examples = [
        close(returns([1, 1, 1], 0.9), [2.71, 1.9, 1.0]),
        close(returns([5.0], 0.7), [5.0]),
        close(returns([2, 3, 4], 0.0), [2, 3, 4]),
        close(env_weight(0.0, 1.0), 1.0),
        close(env_weight(math.log(2), 1.0), 2.0),
        close(env_weight(2.0, 10.0), math.exp(0.2)),
        close(irl_weight(0.5, 1.0), 1.0),
        close(irl_weight(0.25, 2.0), 9.0),
        close(irl_weight(0.3, 0.0), 1.0),
        close(fuse_weights(2.0, 8.0, 1.0), 2.0),
        close(fuse_weights(2.0, 8.0, 0.0), 8.0),
        close(fuse_weights(2.0, 8.0, 0.25), 2 ** 0.25 * 8 ** 0.75),
        close(normalize_clip([4.0, 4.0, 4.0], (0.1, 10)), [1, 1, 1]),
        close(normalize_clip([1.0, 3.0], (0.1, 10)), [0.5, 1.5]),
        normalize_clip([1e6] + [1.0] * 99, (0.1, 10))[0] == 10.0,
    ]
    rng = np.random.default_rng(2)
    brute = []
    for _ in range(200):
        r = rng.uniform(1, 5, rng.integers(1, 30))
        g = rng.uniform(0, 0.99)
        fwd = [math.fsum(r[j] * g ** (j - t) for j in range(t, len(r))) for t in range(len(r))]
        brute.append(close(returns(r, g), fwd))
    n = 10_000
    A = rng.normal(0, 3, n)
    D = rng.uniform(1e-4, 1 - 1e-3, n)
    beta = rng.uniform(0.1, 10, n)
    gam = rng.uniform(0.05, 3, n)
    we, wi = env_weight(A, beta), irl_weight(D, gam)
    props = [
        np.all(env_weight(A + 0.1, beta) > we),
        np.all(irl_weight(D + 1e-3, gam) < wi),
        np.array_equal(fuse_weights(we, wi, 1.0), we),
        np.array_equal(fuse_weights(we, wi, 0.0), wi),
        np.all(irl_weight(D, 0.0) == 1.0),
        np.all(env_weight(np.zeros(n), beta) == 1.0),
    ]
    elapsed = time.perf_counter() - t0
    ok = all(examples) and all(brute) and all(props) and elapsed < 30
    verdict(2, ok, f"examples {sum(examples)}/{len(examples)}, brute-force returns {sum(brute)}/{len(brute)}, "
                   f"properties {sum(map(bool, props))}/{len(props)} over 1e4 inputs; {elapsed:.1f}s")


# -- 3. discriminator separability -------------------------------------------------------------

def test_criterion_3_discriminator_separability(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    dim = 41
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    demo = rng.normal(size=(256, dim)) - 2.0 * direction
    pol = rng.normal(size=(256, dim)) + 2.0 * direction
    disc = make_discriminator(dim, seed=0)
    opt = new_optimizer(disc)
    updates = 0
    for updates in range(1, 201):
        disc, opt, _ = train_discriminator(disc, demo, pol, opt)
    d_pol, d_demo = discriminator_prob(disc, pol).mean(), discriminator_prob(disc, demo).mean()
    r_demo, r_pol = irl_reward(disc, demo).mean(), irl_reward(disc, pol).mean()
    elapsed = time.perf_counter() - t0
    ok = d_pol > 0.9 and d_demo < 0.1 and r_demo > r_pol and elapsed < 60
    verdict(3, ok, f"after {updates} updates D(policy)={d_pol:.3f} D(expert)={d_demo:.3f} "
                   f"r_IRL expert {r_demo:.2f} > policy {r_pol:.2f}; {elapsed:.1f}s")


# -- 4. termination oracle ---------------------------------------------------------------------

def brute_force_end(cats, window, max_same, cap):
    for t in range(1, len(cats) + 1):
        tail = cats[max(0, t - window):t]
        if max(tail.count(c) for c in set(tail)) >= max_same:
            return t, DIVERSITY
        if t >= cap:
            return t, LENGTH_CAP
    return None, None


def _sequence(rng, n_cat, window, max_same, categories_of):
    """Random item sequence; a third of them are steered away from the diversity rule so the cap is reached."""
    steer = rng.random() < 1 / 3
    seq, cats = [], []
    for _ in range(110):
        cand = rng.permutation(len(categories_of)) if steer else [rng.integers(len(categories_of))]
        for item in cand:
            c = categories_of[item]
            tail = cats[-(window - 1):] if window > 1 else []
            if not steer or tail.count(c) + 1 < max_same:
                break
        seq.append(int(item))
        cats.append(int(categories_of[item]))
    return seq


def test_criterion_4_termination_oracle(verdict):
    catalog, users = build_synthetic_catalog(4, 120, 30, 6, n_users=4)
    mismatches, checked, by_reason = 0, 0, {DIVERSITY: 0, LENGTH_CAP: 0}
    rng = np.random.default_rng(4)
    for window, max_same in ((15, 4), (50, 4), (5, 2)):
        rule = TerminationRule(window, max_same, 100)
        tracker = TrackerParams.for_catalog(catalog, rule)
        net = init_net([tracker.d_state + tracker.d_item, 8, 1], seed=0)
        model = WorldModel(net, tracker)
        for _ in range(1000):
            seq = _sequence(rng, catalog.n_categories, window, max_same, catalog.categories)
            state = encode_state([], users[0], tracker)
            end, why = None, None
            for t, item in enumerate(seq, start=1):
                state, _, done, reason = step(state, item, model, rule)
                if done:
                    end, why = t, reason
                    break
            expected = brute_force_end([int(catalog.categories[i]) for i in seq], window, max_same, 100)
            checked += 1
            mismatches += (end, why) != expected
            if why in by_reason:
                by_reason[why] += 1
    ok = mismatches == 0 and by_reason[LENGTH_CAP] > 0 and by_reason[DIVERSITY] > 0
    verdict(4, ok, f"{mismatches} mismatches over {checked} sequences "
                   f"({by_reason[DIVERSITY]} diversity stops, {by_reason[LENGTH_CAP]} length-cap stops)")


# -- 5. metric identities ----------------------------------------------------------------------

def test_criterion_5_metric_identities(verdict):
    rng = np.random.default_rng(5)
    worst, identities = 0.0, True
    for _ in range(100):
        table = [list(rng.uniform(1, 5, rng.integers(1, 101))) for _ in range(rng.integers(1, 40))]
        m = Metrics.from_rewards(table)
        identities &= m.identities_hold()
        lens = [len(r) for r in table]
        sums = [math.fsum(r) for r in table]
        each = [s / n for s, n in zip(sums, lens)]

        def mean_std(xs):
            mu = math.fsum(xs) / len(xs)
            return mu, math.sqrt(math.fsum((x - mu) ** 2 for x in xs) / len(xs))

        ref = [*mean_std(lens), *mean_std(each), *mean_std(sums)]
        got = [m.len_mean, m.len_std, m.r_each_mean, m.r_each_std, m.r_traj_mean, m.r_traj_std]
        worst = max(worst, max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(got, ref)))
    ok = identities and worst <= 1e-12
    verdict(5, ok, f"sum == mean*length exact on every episode: {identities}; max aggregate deviation {worst:.1e}")


# -- 6 and 7. default-config training runs -----------------------------------------------------

@pytest.fixture(scope="module")
def default_runs():
    """R_traj per seed for the expert and the full / no_w / no_w_env variants, plus timings."""
    base = load_config()
    out = {"expert": [], "full": [], "no_w": [], "no_w_env": []}
    t_crit6 = 0.0
    t0 = time.perf_counter()
    for seed in range(N_SEEDS):
        t_seed = time.perf_counter()
        cfg = variant_config(base, "full")
        cfg.seed = seed
        pipe = Pipeline(cfg)
        out["full"].append(pipe.evaluate_variant().r_traj_mean)
        out["expert"].append(pipe.evaluate(pipe.expert()).r_traj_mean)
        t_crit6 += time.perf_counter() - t_seed
        shared = pipe.shared_stages()
        for v in ("no_w", "no_w_env"):
            c = variant_config(base, v)
            c.seed = seed
            out[v].append(Pipeline(c, shared=shared).evaluate_variant().r_traj_mean)
    out["time_crit6"] = t_crit6
    out["time_total"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_criterion_6_surpass_the_expert(verdict, default_runs):
    r = default_runs
    wins = sum(f >= e for f, e in zip(r["full"], r["expert"]))
    ok = wins >= 4 and r["time_crit6"] < 600
    pairs = " ".join(f"{f:.1f}/{e:.1f}" for f, e in zip(r["full"], r["expert"]))
    verdict(6, ok, f"policy >= expert on {wins}/{N_SEEDS} seeds (policy/expert R_traj: {pairs}); "
                   f"{r['time_crit6']:.0f}s")


@pytest.mark.slow
def test_criterion_7_ablation_direction(verdict, default_runs):
    r = default_runs
    wins = sum(f > a and f > b for f, a, b in zip(r["full"], r["no_w"], r["no_w_env"]))
    ok = wins >= 4 and r["time_total"] < 1800
    rows = " ".join(f"{f:.1f}/{a:.1f}/{b:.1f}" for f, a, b in zip(r["full"], r["no_w"], r["no_w_env"]))
    verdict(7, ok, f"full beats no_w and no_w_env on {wins}/{N_SEEDS} seeds (full/no_w/no_w_env R_traj: {rows}); "
                   f"{r['time_total']:.0f}s total")


# -- 8. determinism ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(verdict, tmp_path):
    from ilrec.cli import main

    overrides = ["--set", "policy.rounds=20", "--set", "evalbench.n_episodes=20"]
    dirs = [tmp_path / "a", tmp_path / "b"]
    codes = []
    for d in dirs:
        for stage in ("simulate", "fit-world-model", "collect-demos", "train", "evaluate"):
            codes.append(main([stage, "--run-dir", str(d), *overrides]))
    names = ("world_model.npz", "policy.npz", "demos.jsonl", "weights.jsonl", "train_metrics.jsonl", "metrics.json",
             "episodes.jsonl")
    same = [n for n in names if (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes()]
    ok = set(codes) == {0} and len(same) == len(names)
    verdict(8, ok, f"{len(same)}/{len(names)} artifacts byte-identical across two runs "
                   f"(checkpoints, metrics logs, demonstrations, weights)")


# -- 9. critic fixed point ---------------------------------------------------------------------

def test_criterion_9_critic_fixed_point(verdict):
    gamma = 0.9
    eye = np.eye(3)
    batch = {"states": np.repeat(eye, 2, axis=0), "actions": np.tile([0, 1], 3),
             "rewards": np.repeat([1.0, 2.0, 3.0], 2),
             "next_states": np.repeat(np.array([eye[1], eye[2], np.zeros(3)]), 2, axis=0),
             "dones": np.repeat([0.0, 0.0, 1.0], 2)}
    # hand-solved: V(s2) = 3, V(s1) = 2 + 0.9 * 3, V(s0) = 1 + 0.9 * 4.7
    expected = np.array([5.23, 4.7, 3.0])
    actor = make_scorer(3, (8,), np.eye(2), seed=0)
    for p in actor.net.params:
        p[:] = 0.0  # fixed uniform policy
    q = make_scorer(3, (16,), np.eye(2), seed=1)
    v = init_net([3, 16, 1], seed=2)
    bundle = PolicyBundle(actor, q, v, v.copy(), adam_init(actor.net, 1e-2), adam_init(q.net, 1e-2),
                          adam_init(v, 1e-2))
    for _ in range(2000):
        critic_update(bundle, batch, gamma, sync_interval=100)
    learned = forward(bundle.v, eye)[:, 0]
    err = float(np.max(np.abs(learned - expected)))
    verdict(9, err <= 0.05, f"V = {np.round(learned, 3).tolist()} vs fixed point {expected.tolist()}, "
                            f"max error {err:.4f} after 2000 updates")
