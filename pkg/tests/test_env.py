import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ilrec import _kernels as K
from ilrec.env import (AMAZON_RULE, DIVERSITY, LENGTH_CAP, STEAM_RULE, Catalog, EpsilonGreedy, Simulator,
                       SimulatorConfig, TerminationRule, TrackerParams, UniformRandom, UserProfile,
                       WorldModelConfig, build_synthetic_catalog, check_termination, encode_state, fit_world_model,
                       generate_offline_log, sample_users, step, true_reward)
from ilrec.errors import ConfigError, DataError, UsageError


def brute_force_done(cats, window, max_same, cap):
    """First index whose trailing window holds max_same of one category, or the cap."""
    for t in range(1, len(cats) + 1):
        tail = cats[max(0, t - window):t]
        if max(np.bincount(tail)) >= max_same:
            return t, DIVERSITY
        if t >= cap:
            return t, LENGTH_CAP
    return None, None


def test_catalog_balanced_and_unit_norm():
    catalog, users = build_synthetic_catalog(1, 100, 10, 8)
    assert len(catalog) == 100
    assert np.all(np.bincount(catalog.categories) == 10)
    np.testing.assert_allclose(np.linalg.norm(catalog.embeddings, axis=1), 1.0, atol=1e-6)
    assert len({u.side_features.shape for u in users}) == 1


def test_catalog_deterministic_and_seed_sensitive():
    a, ua = build_synthetic_catalog(1, 100, 10, 8)
    b, ub = build_synthetic_catalog(1, 100, 10, 8)
    c, _ = build_synthetic_catalog(2, 100, 10, 8)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert np.array_equal(a.categories, b.categories)
    assert all(np.array_equal(x.preference, y.preference) for x, y in zip(ua, ub))
    assert a.embeddings.tobytes() != c.embeddings.tobytes()


def test_uneven_catalog_balanced_within_one():
    catalog, _ = build_synthetic_catalog(3, 23, 5, 4)
    counts = np.bincount(catalog.categories)
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("args", [(0, 5, 10, 8), (0, 10, 0, 8), (0, 10, 2, 1)])
def test_catalog_rejects_bad_sizes(args):
    with pytest.raises(ConfigError):
        build_synthetic_catalog(*args)


def _item_user(pref, emb):
    catalog = Catalog(np.array([emb], dtype=float), np.array([0]), 1, np.zeros((len(emb), 1)), 0.0)
    return catalog[0], UserProfile(0, np.array(pref, dtype=float), np.zeros(1))


def test_true_reward_orthogonal_is_midpoint():
    item, user = _item_user([0.0, 1.0], [1.0, 0.0])
    assert true_reward(user, item, 0, SimulatorConfig(noise_scale=0.0)) == pytest.approx(3.0, abs=1e-12)


def test_true_reward_saturates_and_is_deterministic():
    item, user = _item_user([1e3, 0.0], [1.0, 0.0])
    cfg = SimulatorConfig(noise_scale=0.0)
    assert true_reward(user, item, 0, cfg) == pytest.approx(5.0, abs=1e-9)
    item, user = _item_user([0.3, 0.2], [1.0, 0.0])
    assert true_reward(user, item, 7) == true_reward(user, item, 7)
    assert 1.0 <= true_reward(user, item, 7) <= 5.0


def test_offline_log_basic_contracts():
    catalog, users = build_synthetic_catalog(0, 30, 5, 4, n_users=10)
    assert generate_offline_log(catalog, users, n_episodes=0) == []
    log = generate_offline_log(catalog, users, n_episodes=20, seed=0)
    rewards = np.array([t.reward for t in log])
    assert np.all((rewards >= 1) & (rewards <= 5))
    assert sum(t.done for t in log) == 20
    with pytest.raises(ConfigError):
        generate_offline_log(catalog, [], n_episodes=1)


def test_offline_log_rewards_match_simulator():
    catalog, users = build_synthetic_catalog(0, 30, 5, 4, n_users=10)
    rule = TerminationRule()
    tracker = TrackerParams.for_catalog(catalog, rule)
    log = generate_offline_log(catalog, users, n_episodes=3, seed=5, rule=rule, tracker=tracker)
    # replay the same episodes through a fresh simulator with the same noise seeds
    from ilrec.env import step_noise_seed

    sim = Simulator(catalog, tracker, rule)
    eps = [[]]
    for t in log:
        eps[-1].append(t)
        if t.done:
            eps.append([])
    for e, episode in enumerate(eps[:-1]):
        user = next(u for u in users if u.id == episode[0].state.user_id)
        batch = sim.reset([user])
        for k, t in enumerate(episode):
            r, _ = sim.step(batch, np.array([0]), np.array([t.action]), [step_noise_seed(5, e, k)])
            assert r[0] == t.reward


def test_greedy_log_beats_uniform_log():
    catalog, users = build_synthetic_catalog(0, 100, 10, 8)
    g = generate_offline_log(catalog, users, EpsilonGreedy(0.0), n_episodes=200, seed=3)
    u = generate_offline_log(catalog, users, UniformRandom(), n_episodes=200, seed=3)
    assert np.mean([t.reward for t in g]) > np.mean([t.reward for t in u])


def test_world_model_constant_rewards(world):
    log = [type(t)(t.state, t.action, 3.0, t.next_state, t.done) for t in world.log[:400]]
    wm = fit_world_model(log, world.tracker, WorldModelConfig(epochs=30))
    enc = np.stack([t.state.encoding for t in log])
    act = np.array([t.action for t in log])
    np.testing.assert_allclose(wm.predict(enc, act), 3.0, atol=0.05)


def test_world_model_beats_constant_predictor(world):
    stats = world.world_model.training_stats
    assert stats["train_mse"] <= stats["target_variance"]


def test_world_model_rejects_non_finite(world):
    log = list(world.log[:10])
    bad = log[4].state
    enc = bad.encoding.copy()
    enc[0] = np.nan
    log[4] = type(log[4])(type(bad)(enc, bad.history, bad.step_index), log[4].action, 3.0, log[4].next_state,
                          log[4].done)
    with pytest.raises(DataError, match="index 4"):
        fit_world_model(log, world.tracker)
    with pytest.raises(DataError):
        fit_world_model([], world.tracker)


@pytest.mark.slow
def test_world_model_holdout_on_default_config():
    rule = TerminationRule()
    catalog, users = build_synthetic_catalog(0, 100, 10, 8)
    tracker = TrackerParams.for_catalog(catalog, rule)
    log = generate_offline_log(catalog, users, n_episodes=3000, seed=0, rule=rule, tracker=tracker,
                               max_transitions=5000)
    wm = fit_world_model(log, tracker, WorldModelConfig(holdout=0.2))
    assert wm.training_stats["holdout_mse"] < 0.5


def test_encode_state_contracts(world, rng):
    user = world.users[0]
    s0 = encode_state([], user, world.tracker)
    other = UserProfile(99, user.preference, user.side_features + 1.0)
    assert s0.step_index == 0 and s0.history == ()
    assert s0.encoding.shape == (world.tracker.d_state,)
    # the empty-history state depends on the user only through side features
    assert not np.array_equal(s0.encoding, encode_state([], other, world.tracker).encoding)
    same_side = UserProfile(5, -user.preference, user.side_features)
    assert np.array_equal(s0.encoding, encode_state([], same_side, world.tracker).encoding)
    h = [int(x) for x in rng.integers(0, 40, 7)]
    assert np.array_equal(encode_state(h, user, world.tracker).encoding, encode_state(h, user, world.tracker).encoding)
    with pytest.raises(DataError):
        encode_state([40], user, world.tracker)


def test_encode_state_last_item_matters(world, rng):
    user = world.users[0]
    for _ in range(100):
        h = [int(x) for x in rng.integers(0, 40, rng.integers(1, 12))]
        alt = h[:-1] + [(h[-1] + 1 + int(rng.integers(0, 39))) % 40]
        assert not np.array_equal(encode_state(h, user, world.tracker).encoding,
                                  encode_state(alt, user, world.tracker).encoding)


def test_step_reward_and_terminal(world):
    s = encode_state([], world.users[0], world.tracker)
    nxt, r, done, why = step(s, 3, world.world_model, world.rule)
    assert 1.0 <= r <= 5.0 and nxt.step_index == 1
    assert r == pytest.approx(world.world_model.predict(s.encoding[None], np.array([3]))[0])
    with pytest.raises(UsageError):
        step(s, 40, world.world_model, world.rule)
    nxt.terminal = True
    with pytest.raises(UsageError):
        step(nxt, 0, world.world_model, world.rule)


def _cat_items(world, c):
    return [i for i in range(len(world.catalog)) if world.catalog.categories[i] == c]


def test_amazon_fourth_same_category_in_window_terminates(world):
    rule = AMAZON_RULE
    a = _cat_items(world, 0)
    fill = [i for c in range(1, 5) for i in _cat_items(world, c)[:2]]
    # three of category 0, then 8 others (window stays 15), then a 4th category-0 item
    seq = a[:3] + fill + [a[3]]
    s = encode_state([], world.users[0], world.tracker)
    for k, item in enumerate(seq):
        s, _, done, why = step(s, item, world.world_model, rule)
        assert done == (k == len(seq) - 1)
    assert why == DIVERSITY


def test_window_slides_past_old_items():
    rule = TerminationRule(window=5, max_same=2)
    assert check_termination([0, 1, 2, 3, 4, 0], rule) == (False, None)
    assert check_termination([0, 1, 2, 3, 0], rule) == (True, DIVERSITY)


def test_steam_rule_and_length_cap():
    assert (STEAM_RULE.window, STEAM_RULE.max_same, STEAM_RULE.length_cap) == (50, 4, 100)
    cats = [k % 20 for k in range(100)]  # 2 per category in any 50-window... 3 in 60
    rule = TerminationRule(window=50, max_same=4)
    for t in range(1, 100):
        assert check_termination(cats[:t], rule) == (False, None)
    assert check_termination(cats, rule) == (True, LENGTH_CAP)


def test_length_cap_is_terminal_even_without_repeats():
    rule = TerminationRule(window=15, max_same=15, length_cap=100)
    cats = [k % 10 for k in range(100)]
    assert check_termination(cats[:99], rule)[0] is False
    assert check_termination(cats, rule) == (True, LENGTH_CAP)


def test_diversity_flag_off_keeps_only_cap():
    rule = TerminationRule(window=5, max_same=2, diversity=False)
    assert check_termination([0, 0, 0], rule) == (False, None)
    assert check_termination([0] * 100, rule) == (True, LENGTH_CAP)


def test_rule_validation():
    with pytest.raises(ConfigError):
        TerminationRule(window=3, max_same=4)
    with pytest.raises(ConfigError):
        TerminationRule(length_cap=0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=120), st.sampled_from([(5, 2), (15, 4), (50, 4)]))
def test_batch_termination_matches_brute_force(cats, nm):
    window, max_same = nm
    rule = TerminationRule(window, max_same)
    expect_t, expect_why = brute_force_done(np.array(cats), window, max_same, 100)
    for t in range(1, len(cats) + 1):
        done, why = check_termination(cats[:t], rule)
        if expect_t is not None and t == expect_t:
            assert (done, why) == (True, expect_why)
            break
        assert not done


def test_numba_and_numpy_kernels_agree(rng):
    cats = rng.integers(0, 6, (50, 40))
    lengths = rng.integers(0, 41, 50)
    for window, m in [(5, 2), (15, 4)]:
        assert np.array_equal(K.np_window_counts(cats, lengths, window, 6),
                              K.nb_window_counts(cats, lengths, window, 6))
        assert np.array_equal(K.np_diversity_hits(cats, lengths, window, m),
                              K.nb_diversity_hits(cats, lengths, window, m))
    r = rng.random((7, 30))
    np.testing.assert_allclose(K.np_discounted_returns(r[0], 0.9), K.nb_discounted_returns(r[0], 0.9),
                               rtol=0, atol=1e-12)
    emb = rng.normal(size=(20, 4))
    hist = rng.integers(0, 20, (9, 10))
    hl = rng.integers(0, 11, 9)
    np.testing.assert_allclose(K.np_ewma_encode(hist, hl, emb, 0.9), K.nb_ewma_encode(hist, hl, emb, 0.9),
                               atol=1e-12)
    q = rng.normal(size=(15, 4))
    assert np.array_equal(K.np_cosine_argmax(q, emb), K.nb_cosine_argmax(q, emb))
    a = rng.integers(0, 1000, 64)
    b = rng.integers(0, 1000, 64)
    assert np.array_equal(K.np_hash_uniform(7, a, b), K.nb_hash_uniform(7, a, b))


def test_sample_users_offset_disjoint():
    catalog, users = build_synthetic_catalog(0, 30, 5, 4, n_users=10)
    ev = sample_users(catalog, 10, seed=0, id_offset=1000)
    assert {u.id for u in users}.isdisjoint({u.id for u in ev})
    assert not np.allclose(users[0].preference, ev[0].preference)


def test_disable_flag_selects_numpy_with_identical_results(tmp_path):
    import subprocess
    import sys

    code = ("import numpy as np, sys\n"
            "from ilrec import _kernels as K\n"
            "from ilrec.env import build_synthetic_catalog, generate_offline_log\n"
            "cat, users = build_synthetic_catalog(0, 30, 5, 4, n_users=10)\n"
            "log = generate_offline_log(cat, users, n_episodes=10, seed=1)\n"
            "np.save(sys.argv[1], np.array([[t.action, t.reward] + list(t.state.encoding) for t in log]))\n"
            "print(K.USE_NUMBA)\n")
    out = {}
    for flag in ("0", "1"):
        path = tmp_path / f"log{flag}.npy"
        res = subprocess.run([sys.executable, "-c", code, str(path)], capture_output=True, text=True, check=True,
                             env={**__import__("os").environ, "ILREC_DISABLE_NUMBA": flag})
        out[flag] = (res.stdout.strip(), np.load(path))
    assert out["0"][0] == "True" and out["1"][0] == "False"
    np.testing.assert_allclose(out["0"][1], out["1"][1], rtol=0, atol=1e-12)
