import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpae_lab.env import (BUILTIN_NAMES, AnomalyConfig, DecPomdp, EnumerationBudgetExceeded, ModelError,
                          TabularPolicy, Trajectory, enumerate_trajectories, make_builtin, rollout,
                          validate_model, validate_policy, wrap_anomaly)


def coin_model(n_agents=1, horizon=1):
    shape = (2,) * n_agents
    return DecPomdp(
        num_agents=n_agents, num_states=1, action_counts=shape,
        transition=np.ones((1,) + shape + (1,)), reward=np.zeros((1,) + shape),
        observation=tuple(np.eye(1) for _ in range(n_agents)), initial_dist=np.ones(1),
        discount=0.5, horizon=horizon, reward_bound=1.0,
    )


def test_identity_uniform_model_validates():
    assert validate_model(coin_model()).ok


def test_bad_transition_row_reports_index():
    m = coin_model()
    P = m.transition.copy()
    P[0, 1, 0] = 0.9
    rep = validate_model(DecPomdp(**{**m.__dict__, "transition": P}))
    assert not rep.ok
    assert any("(0, 1)" in f and "0.9" in f for f in rep.failures)


def test_reward_bound_violation_fails():
    m = coin_model()
    R = m.reward.copy()
    R[0, 0] = 2.0
    rep = validate_model(DecPomdp(**{**m.__dict__, "reward": R}))
    assert not rep.checks["reward_bound"]


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_validate_and_policies_normalized(name):
    b = make_builtin(name)
    assert validate_model(b.model).ok
    for pol in b.policies.values():
        assert validate_policy(b.model, pol).ok
        for t in pol.tables:
            assert np.all(np.abs(t.sum(axis=1) - 1) <= 1e-12)


def test_builtin_shapes():
    assert make_builtin("single_chain").model.num_agents == 1
    assert make_builtin("matrix_team", {"n_agents": 2, "n_actions": 2}).model.num_joint_actions == 4
    with pytest.raises(ValueError):
        make_builtin("nope")


def test_deterministic_model_and_policy_gives_unique_trajectory():
    b = make_builtin("chain_gather")
    trajs = [rollout(b.model, b.policies["optimal"], seed) for seed in range(5)]
    for tr in trajs[1:]:
        assert np.array_equal(tr.actions, trajs[0].actions) and np.array_equal(tr.states, trajs[0].states)
    assert trajs[0].terminal and trajs[0].rewards.sum() == 1.0


def test_rollout_same_seed_identical():
    b = make_builtin("matrix_team")
    pi = TabularPolicy.random(b.model, np.random.default_rng(0))
    a, c = rollout(b.model, pi, 7), rollout(b.model, pi, 7)
    assert np.array_equal(a.actions, c.actions) and np.array_equal(a.behavior_logp, c.behavior_logp)


def test_fair_coin_frequency():
    m = coin_model()
    pi = TabularPolicy.uniform(m)
    rng = np.random.default_rng(3)
    freq = np.mean([rollout(m, pi, rng).actions[0, 0] for _ in range(1000)])
    assert abs(freq - 0.5) < 0.05


def test_zero_row_sampling_raises():
    m = coin_model()
    bad = TabularPolicy([np.array([[1.0, 0.0]])])
    P = np.zeros_like(m.transition)
    broken = DecPomdp(**{**m.__dict__, "transition": P})
    with pytest.raises(ModelError):
        rollout(broken, bad, 0)


def test_enumeration_stateless_two_agents():
    m = coin_model(n_agents=2, horizon=1)
    out = enumerate_trajectories(m, TabularPolicy.uniform(m))
    assert len(out) == 4
    assert all(abs(p - 0.25) < 1e-15 for _, p in out)


def test_enumeration_deterministic_single():
    b = make_builtin("chain_gather")
    out = enumerate_trajectories(b.model, b.policies["optimal"])
    assert len(out) == 1 and out[0][1] == 1.0


def test_enumeration_budget_refuses():
    b = make_builtin("matrix_team", {"horizon": 10})
    with pytest.raises(EnumerationBudgetExceeded):
        enumerate_trajectories(b.model, b.policies["uniform"])


@pytest.mark.parametrize("name", ["matrix_team", "chain_gather", "single_chain", "anomaly_team"])
def test_enumeration_mass_sums_to_one(name, rng):
    b = make_builtin(name)
    pi = TabularPolicy.random(b.model, rng)
    total = sum(p for _, p in enumerate_trajectories(b.model, pi))
    assert abs(total - 1.0) < 1e-10


def test_monte_carlo_return_matches_enumeration(rng):
    b = make_builtin("chain_gather")
    pi = TabularPolicy.random(b.model, rng)
    exact = sum(p * tr.rewards.sum() for tr, p in enumerate_trajectories(b.model, pi))
    rets = np.array([rollout(b.model, pi, rng).rewards.sum() for _ in range(10_000)])
    se = rets.std(ddof=1) / np.sqrt(len(rets))
    assert abs(rets.mean() - exact) < 3 * se


def test_anomaly_mixture_arithmetic():
    b = make_builtin("anomaly_team")
    mu = wrap_anomaly(b.policies["uniform"], AnomalyConfig(0, 0.05, 0))
    assert mu.tables[0][0, 0] == pytest.approx(0.2875, abs=1e-15)
    assert np.array_equal(mu.tables[1], b.policies["uniform"].tables[1])


def test_anomaly_p0_identity_and_p1_deterministic(rng):
    m = make_builtin("anomaly_team").model
    pi = TabularPolicy.random(m, rng)
    mu0 = wrap_anomaly(pi, AnomalyConfig(1, 0.0, 2))
    assert all(np.array_equal(a, c) for a, c in zip(mu0.tables, pi.tables))
    mu1 = wrap_anomaly(pi, AnomalyConfig(1, 1.0, 2))
    assert np.array_equal(mu1.tables[1], np.tile(np.eye(4)[2], (1, 1)))


def test_anomaly_invalid_indices():
    pi = make_builtin("anomaly_team").policies["uniform"]
    with pytest.raises(ValueError):
        wrap_anomaly(pi, AnomalyConfig(5, 0.1, 0))
    with pytest.raises(ValueError):
        wrap_anomaly(pi, AnomalyConfig(0, 0.1, 9))


def test_anomaly_events_logged():
    b = make_builtin("anomaly_team", {"probability": 0.5})
    mu = wrap_anomaly(b.policies["uniform"], b.anomaly)
    rng = np.random.default_rng(0)
    trs = [rollout(b.model, mu, rng) for _ in range(200)]
    for tr in trs:
        assert len(tr.anomaly_events) == len(tr)
        assert np.all(tr.actions[tr.anomaly_events, 0] == b.anomaly.forced_action)
    rate = np.mean(np.concatenate([t.anomaly_events for t in trs]))
    assert abs(rate - 0.5) < 0.06


def test_serialization_roundtrip(rng):
    b = make_builtin("chain_gather")
    m2 = DecPomdp.from_dict(json.loads(json.dumps(b.model.to_dict())))
    assert np.array_equal(m2.transition, b.model.transition) and np.array_equal(m2.terminal, b.model.terminal)
    pi = TabularPolicy.random(b.model, rng)
    pi2 = TabularPolicy.from_dict(json.loads(json.dumps(pi.to_dict())))
    assert all(np.array_equal(a, c) for a, c in zip(pi.tables, pi2.tables))
    tr = rollout(b.model, pi, 1)
    tr2 = Trajectory.from_jsonl(tr.to_jsonl())
    assert np.array_equal(tr.actions, tr2.actions) and np.array_equal(tr.behavior_logp, tr2.behavior_logp)
    assert tr2.terminal == tr.terminal


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 3.0))
def test_random_policy_rows_normalized(seed, temp):
    m = make_builtin("matrix_team", {"n_actions": 3}).model
    pi = TabularPolicy.random(m, np.random.default_rng(seed), temp)
    assert validate_policy(m, pi).ok
