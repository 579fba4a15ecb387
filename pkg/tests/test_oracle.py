import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpae_lab.env import DecPomdp, TabularPolicy, make_builtin, rollout
from gpae_lab.oracle import (apply_operator_off, apply_operator_on, augmented_fixed_point, contraction_ratios,
                             counterfactual_value, exact_joint_q, expected_root_advantage,
                             expected_root_advantage_dp, fixed_point, full_ratio_bias, mixed_policy,
                             on_policy_contraction_bound, part_iv_bias_bound, random_value_table, star_policy,
                             state_values, trace_table, zero_value_table, JointQTable)
from gpae_lab.experiments import perturbed_policy


def one_state_one_action(r=1.0, gamma=0.5, H=2):
    return DecPomdp(num_agents=1, num_states=1, action_counts=(1,), transition=np.ones((1, 1, 1)),
                    reward=np.full((1, 1), r), observation=(np.eye(1),), initial_dist=np.ones(1),
                    discount=gamma, horizon=H, reward_bound=abs(r))


def test_q_single_state_single_action():
    m = one_state_one_action()
    q = exact_joint_q(m, TabularPolicy.uniform(m))
    assert q.values[0, 0, 0] == pytest.approx(1.5, abs=1e-15)


def test_q_zero_rewards():
    b = make_builtin("chain_gather")
    m = DecPomdp(**{**b.model.__dict__, "reward": np.zeros_like(b.model.reward)})
    assert np.all(exact_joint_q(m, b.policies["uniform"]).values == 0)


def test_matrix_team_frozen_values():
    # uniform play: mean reward 0.625; stage-0 continuation 0.9*0.625*(1+0.9)
    b = make_builtin("matrix_team")
    pi = b.policies["uniform"]
    q = exact_joint_q(b.model, pi)
    assert q.values[0, 0, 1, 1] == pytest.approx(2.56875, abs=1e-12)
    eq = counterfactual_value(b.model, q, pi, 0)
    assert eq.values[0, 0, 0, 1] == pytest.approx(2.06875, abs=1e-12)


def test_q_matches_monte_carlo_chain(rng):
    b = make_builtin("chain_gather")
    pi = TabularPolicy.random(b.model, rng)
    q = exact_joint_q(b.model, pi)
    v0 = state_values(b.model, pi, q)[0, 0]
    g = b.model.discount
    rets = []
    for _ in range(100_000 // 10):
        tr = rollout(b.model, pi, rng)
        rets.append(float(np.sum(tr.rewards * g ** np.arange(len(tr)))))
    rets = np.array(rets)
    assert abs(rets.mean() - v0) < 3 * rets.std(ddof=1) / np.sqrt(len(rets)) + 1e-12


def test_counterfactual_examples():
    m = make_builtin("matrix_team").model
    q = JointQTable(np.zeros((m.horizon, 1, 2, 2)), m.discount)
    q.values[0, 0, :, 0] = [2.0, 4.0]
    pi = TabularPolicy.uniform(m)
    assert counterfactual_value(m, q, pi, 0).values[0, 0, 0, 0] == 3.0
    det = TabularPolicy([np.array([[0.0, 1.0]]), np.array([[0.5, 0.5]])])
    assert counterfactual_value(m, q, det, 0).values[0, 0, 0, 0] == 4.0
    with pytest.raises(IndexError):
        counterfactual_value(m, q, pi, 2)


def test_single_agent_eq_is_state_value(rng):
    b = make_builtin("single_chain")
    pi = TabularPolicy.random(b.model, rng)
    q = exact_joint_q(b.model, pi)
    eq = counterfactual_value(b.model, q, pi, 0)
    assert np.allclose(eq.values[..., 0], state_values(b.model, pi, q), atol=1e-14)


@pytest.mark.parametrize("name", ["matrix_team", "chain_gather", "single_chain"])
def test_on_policy_fixed_point_lambda1(name, rng):
    b = make_builtin(name)
    pi = TabularPolicy.random(b.model, rng)
    q = exact_joint_q(b.model, pi)
    for i in range(b.model.num_agents):
        eq = counterfactual_value(b.model, q, pi, i)
        assert apply_operator_on(b.model, pi, 1.0, eq).sup_distance(eq) < 1e-10
        rep = fixed_point(lambda f: apply_operator_on(b.model, pi, 1.0, f), zero_value_table(b.model, i))
        assert rep.converged and rep.fixed_point.sup_distance(eq) < 1e-8


def test_fixed_point_from_fixed_point_is_one_iteration(rng):
    b = make_builtin("chain_gather")
    pi = TabularPolicy.random(b.model, rng)
    eq = counterfactual_value(b.model, exact_joint_q(b.model, pi), pi, 1)
    rep = fixed_point(lambda f: apply_operator_on(b.model, pi, 0.7, f), eq)
    assert rep.iterations == 1 and rep.converged
    report = json.loads(rep.to_json())
    assert report["converged"] and report["deltas"]


def test_fixed_point_lambda_below_one_ratio_and_monotone(rng):
    b = make_builtin("matrix_team", {"horizon": 30})
    m = b.model
    pi = TabularPolicy.random(m, rng)
    lam = 0.6
    rep = fixed_point(lambda f: apply_operator_on(m, pi, lam, f), zero_value_table(m, 0), tol=1e-12)
    assert rep.converged
    assert rep.contraction_ratio <= on_policy_contraction_bound(m.discount, lam) + 1e-6
    d = np.array(rep.deltas)
    assert np.all(d[2:] <= d[1:-1] + 1e-12)
    eq = counterfactual_value(m, exact_joint_q(m, pi), pi, 0)
    assert rep.fixed_point.sup_distance(eq) < 1e-9


def test_zero_reward_zero_input_zero_output():
    b = make_builtin("chain_gather")
    m = DecPomdp(**{**b.model.__dict__, "reward": np.zeros_like(b.model.reward)})
    out = apply_operator_on(m, b.policies["uniform"], 0.5, zero_value_table(m, 0))
    assert np.all(out.values == 0)


def test_fixed_point_rejects_bad_tol():
    with pytest.raises(ValueError):
        fixed_point(lambda f: f, None, tol=0)


def test_nonconvergence_reported_not_raised(rng):
    b = make_builtin("matrix_team", {"horizon": 30})
    pi = b.policies["uniform"]
    rep = fixed_point(lambda f: apply_operator_on(b.model, pi, 0.1, f), random_value_table(b.model, 0, rng),
                      tol=1e-14, max_iter=2)
    assert not rep.converged and rep.iterations == 2 and len(rep.deltas) == 2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 0.5, 0.95, 1.0]))
def test_on_policy_contraction_property(seed, lam):
    rng = np.random.default_rng(seed)
    m = make_builtin("chain_gather").model
    pi = TabularPolicy.random(m, rng)
    f1, f2 = random_value_table(m, 0, rng, 3.0), random_value_table(m, 0, rng, 3.0)
    R = lambda f: apply_operator_on(m, pi, lam, f)
    assert R(f1).sup_distance(R(f2)) <= m.discount * f1.sup_distance(f2) + 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["ST", "IT", "DT"]), st.sampled_from([0.5, 1.0]))
def test_off_policy_truncated_contraction_property(seed, scheme, lam):
    rng = np.random.default_rng(seed)
    m = make_builtin("matrix_team", {"horizon": 6}).model
    pi = TabularPolicy.random(m, rng)
    mu = perturbed_policy(pi, rng, 1.0)
    f1, f2 = random_value_table(m, 1, rng, 3.0), random_value_table(m, 1, rng, 3.0)
    R = lambda f: apply_operator_off(m, pi, mu, f, scheme=scheme, lam=lam)
    assert R(f1).sup_distance(R(f2)) <= m.discount * f1.sup_distance(f2) + 1e-9


def test_off_reduces_to_on(rng):
    m = make_builtin("chain_gather").model
    pi = TabularPolicy.random(m, rng)
    for _ in range(10):
        f = random_value_table(m, 1, rng, 4.0)
        lam = float(rng.uniform(0.1, 1))
        off = apply_operator_off(m, pi, pi, f, scheme="lambda_only", lam=lam)
        assert off.sup_distance(apply_operator_on(m, pi, lam, f)) <= 1e-12


def test_off_policy_zero_behavior_mass_raises(rng):
    m = make_builtin("matrix_team").model
    pi = TabularPolicy.uniform(m)
    mu = TabularPolicy([np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])])
    with pytest.raises(ZeroDivisionError):
        apply_operator_off(m, pi, mu, zero_value_table(m, 0), scheme="untruncated")


@pytest.mark.parametrize("name", ["matrix_team", "chain_gather"])
def test_root_expectation_enumeration_matches_dp(name, rng):
    m = make_builtin(name).model
    pi = TabularPolicy.random(m, rng)
    mu = perturbed_policy(pi, rng, 0.8)
    f = random_value_table(m, 0, rng)
    for scheme in ("DT", "ST", "IT", "untruncated", "lambda_only"):
        c = trace_table(m, pi, mu, 0, scheme, lam=0.8)
        enum = expected_root_advantage(m, pi, mu, f, scheme=scheme, lam=0.8)
        assert np.abs(enum - expected_root_advantage_dp(m, mu, c, f)).max() < 1e-12


def test_zero_reward_root_advantage_zero():
    b = make_builtin("matrix_team")
    m = DecPomdp(**{**b.model.__dict__, "reward": np.zeros_like(b.model.reward)})
    out = expected_root_advantage(m, b.policies["uniform"], b.policies["uniform"], zero_value_table(m, 0))
    assert np.all(out == 0)


def test_telescoping_identity(rng):
    m = make_builtin("chain_gather").model
    pi = TabularPolicy.random(m, rng)
    q = exact_joint_q(m, pi)
    for i in range(2):
        eq = counterfactual_value(m, q, pi, i)
        G = expected_root_advantage(m, pi, pi, eq, scheme="lambda_only", lam=1.0)
        assert np.abs(G - (q.values[0] - eq.values[0])).max() < 1e-10


def test_full_ratio_unbiased_when_only_own_behavior_differs(rng):
    m = make_builtin("matrix_team").model
    pi = TabularPolicy.random(m, rng)
    q = exact_joint_q(m, pi)
    for i in range(2):
        mu = mixed_policy(perturbed_policy(pi, rng, 1.0), pi, i)
        eq = counterfactual_value(m, q, pi, i)
        G = expected_root_advantage(m, pi, mu, eq, scheme="untruncated")
        assert np.abs(G - (q.values[0] - eq.values[0])).max() < 1e-10


def test_full_ratio_general_behavior_bias_is_closed_form(rng):
    m = make_builtin("chain_gather").model
    pi = TabularPolicy.random(m, rng)
    mu = perturbed_policy(pi, rng, 1.0)
    q = exact_joint_q(m, pi)
    eq = counterfactual_value(m, q, pi, 0)
    G = expected_root_advantage(m, pi, mu, eq, scheme="untruncated")
    bias = full_ratio_bias(m, pi, mu, eq)
    assert np.abs(bias).max() > 1e-3  # the gap is real
    assert np.abs(G - (q.values[0] - eq.values[0]) - bias).max() < 1e-12


def test_full_ratio_fixed_point_is_augmented_value(rng):
    m = make_builtin("chain_gather").model
    pi = TabularPolicy.random(m, rng)
    mu = perturbed_policy(pi, rng, 1.0)
    rep = fixed_point(lambda f: apply_operator_off(m, pi, mu, f, scheme="untruncated"), zero_value_table(m, 1))
    assert rep.converged
    assert rep.fixed_point.sup_distance(augmented_fixed_point(m, pi, mu, 1)) < 1e-10


def test_dt_bias_within_part_iv_bound(rng):
    m = make_builtin("matrix_team").model
    pi = TabularPolicy.random(m, rng)
    mu = perturbed_policy(pi, rng, 1.0)
    q_pi, q_mu = exact_joint_q(m, pi), exact_joint_q(m, mu)
    bound = part_iv_bias_bound(m, q_pi, q_mu)
    for i in range(2):
        eq = counterfactual_value(m, q_pi, pi, i)
        G = expected_root_advantage(m, pi, mu, eq, scheme="DT", lam=1.0)
        bias = np.abs(G - (q_pi.values[0] - eq.values[0]))
        assert np.all(bias <= bound + 1e-12)


def test_star_policy_normalized_and_on_policy_identity(rng):
    m = make_builtin("matrix_team").model
    pi = TabularPolicy.random(m, rng)
    mu = perturbed_policy(pi, rng, 0.5)
    ps = star_policy(m, pi, mu, 0)
    assert np.allclose(ps.sum(axis=1), 1.0, atol=1e-12)
    same = star_policy(m, pi, pi, 0)
    assert np.allclose(same[:, :, 0], pi.tables[0], atol=1e-12)


def test_eq_tables_bounded(rng):
    for name in ("matrix_team", "chain_gather", "single_chain"):
        m = make_builtin(name).model
        pi = TabularPolicy.random(m, rng)
        q = exact_joint_q(m, pi)
        lim = m.reward_bound * (1 - m.discount ** m.horizon) / (1 - m.discount)
        assert np.abs(q.values).max() <= lim + 1e-9
        for i in range(m.num_agents):
            assert np.abs(counterfactual_value(m, q, pi, i).values).max() <= m.reward_bound / (1 - m.discount)


def test_contraction_ratio_sampler_shape(rng):
    m = make_builtin("single_chain").model
    pi = TabularPolicy.random(m, rng)
    r = contraction_ratios(lambda f: apply_operator_on(m, pi, 0.5, f), m, 0, rng, pairs=20)
    assert r.shape == (20,) and np.all(r <= m.discount + 1e-9)
