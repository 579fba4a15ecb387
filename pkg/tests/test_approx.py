import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpae_lab.approx import (Adam, CriticNet, HeadNet, MLP, PolicyNet, actor_loss, critic_loss, grad_check,
                             head_loss, load_checkpoint, log_softmax, save_checkpoint, softmax, sync_target)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_normalized(z):
    p = softmax(np.array([z]))
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
    assert np.allclose(np.exp(log_softmax(np.array([z]))), p)


def test_policy_uniform_at_init():
    net = PolicyNet(4, 2, 3, width=16, seed=0)
    tab = net.table()
    assert tab.shape == (2, 4, 3) and np.allclose(tab, 1 / 3)


def test_policy_logp_matches_probs():
    net = PolicyNet(4, 2, 3, width=16, seed=0, out_scale=1.0)
    p, lp = net.forward(np.array([0, 1, 2, 3]), np.array([0, 1, 0, 1]))
    assert np.allclose(np.log(p), lp, atol=1e-12) and np.allclose(p.sum(1), 1)


def test_policy_rejects_bad_obs_dim():
    net = PolicyNet(4, 2, 3, width=8)
    with pytest.raises(ValueError):
        net.features(np.zeros((2, 5)), np.array([0, 1]))


def test_critic_zero_init_and_deterministic():
    c = CriticNet(5, 2, 3, width=16, seed=3)
    xs, xo, xp = c.encode([0, 1, 4], [0, 1, 0], [[0, 1], [2, 2], [1, 0]], np.full((3, 3), 1 / 3))
    out, _ = c.forward(xs, xo, xp)
    assert np.all(out == 0)
    c2 = CriticNet(5, 2, 3, width=16, seed=3, out_scale=1.0)
    c3 = CriticNet(5, 2, 3, width=16, seed=3, out_scale=1.0)
    assert np.array_equal(c2.forward(xs, xo, xp)[0], c3.forward(xs, xo, xp)[0])


def test_critic_masks_own_action():
    c = CriticNet(5, 2, 3, width=16, seed=0, out_scale=1.0)
    p = np.full((1, 3), 1 / 3)
    a = c.forward(*c.encode([2], [0], [[0, 1]], p))[0]
    b = c.forward(*c.encode([2], [0], [[2, 1]], p))[0]
    assert a[0] == b[0]


def test_linear_net_gradient_closed_form(rng):
    W = rng.normal(size=(3, 1))
    mlp = MLP([3, 1], rng, "l.", 1.0)
    mlp_params = mlp.params
    mlp_params["l.W0"][:] = W
    mlp_params["l.b0"][:] = 0.0
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    out, cache = mlp.forward(x, mlp_params)
    diff = out[:, 0] - y
    grads = {}
    mlp.backward(cache, (2 * diff / 5)[:, None], mlp_params, grads)
    assert np.allclose(grads["l.W0"][:, 0], 2 * x.T @ diff / 5, atol=1e-12)


def test_constant_loss_zero_grad():
    net = HeadNet(4, 1, 8, seed=0)
    res = head_loss(net, np.eye(4), np.zeros(4))
    assert res.loss == 0.0
    # output layer sees zero error, hidden layers get zero upstream gradient
    assert all(np.all(g == 0) for g in res.grads.values())


def test_critic_loss_example():
    c = CriticNet(3, 1, 2, width=4)
    xs, xo, xp = c.encode([0], [0], [[0]], [[0.5, 0.5]])
    assert critic_loss(c, xs, xo, xp, [1.0]).loss == 1.0


def test_adam_first_step_and_zero_grad():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1)
    opt.step(p, {"w": np.array([3.0, -0.5])})
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-6)
    q = {"w": np.array([1.0])}
    Adam(q).step(q, {"w": np.zeros(1)})
    assert q["w"][0] == 1.0


def test_adam_annealing_and_nonfinite():
    p = {"w": np.ones(2)}
    opt = Adam(p, lr=0.2, anneal=True)
    assert opt.lr_at(0.5) == pytest.approx(0.1)
    res = opt.step(p, {"w": np.array([np.nan, 1.0])})
    assert not res.applied and "w" in res.message and np.all(p["w"] == 1)


def test_target_sync_and_freeze(rng):
    net = HeadNet(3, 1, 8, seed=0, out_scale=1.0)
    tgt = net.copy()
    x = np.eye(3)
    before = tgt.forward(x)[0].copy()
    net.params["v.W2" if "v.W2" in net.params else sorted(net.params)[0]] += 1.0
    assert np.array_equal(tgt.forward(x)[0], before)
    sync_target(net, tgt)
    assert np.array_equal(tgt.forward(x)[0], net.forward(x)[0])


def _actor_setup(rng, n=10, A=3):
    net = PolicyNet(4, 2, A, width=8, seed=1, out_scale=1.0)
    x = net.features(rng.integers(0, 4, n), rng.integers(0, 2, n))
    acts = rng.integers(0, A, n)
    return net, x, acts


def test_actor_clip_semantics(rng):
    net = PolicyNet(4, 2, 3, width=8, seed=0)
    x = net.features(np.array([0]), np.array([0]))
    lp = np.log(np.array([1 / 3]))
    res = actor_loss(net, x, [1], lp, 1.0, np.array([1.0]), 0.2, 0.0)
    assert res.loss == pytest.approx(-1.0)
    # ratio above the band with positive advantage: gradient vanishes
    res = actor_loss(net, x, [1], np.log([1 / 3 / 1.5]), 1.0, np.array([1.0]), 0.2, 0.0)
    assert res.loss == pytest.approx(-1.2) and all(np.allclose(g, 0) for g in res.grads.values())


def test_grad_check_losses(rng):
    net, x, acts = _actor_setup(rng)
    lpmu = np.log(rng.uniform(0.2, 0.5, len(acts)))
    adv = rng.normal(size=len(acts))
    ro = rng.uniform(0.8, 1.2, len(acts))
    rep = grad_check(lambda p: actor_loss(net, x, acts, lpmu, ro, adv, 0.2, 0.01, params=p), net.params, rng)
    assert rep.passed(1e-4), rep.to_json()
    c = CriticNet(4, 2, 3, width=8, seed=2, out_scale=1.0)
    ins = c.encode(rng.integers(0, 4, 6), rng.integers(0, 2, 6), rng.integers(0, 3, (6, 2)),
                   softmax(rng.normal(size=(6, 3))))
    y = rng.normal(size=6)
    rep = grad_check(lambda p: critic_loss(c, *ins, y, params=p), c.params, rng)
    assert rep.passed(1e-4), rep.to_json()


def test_checkpoint_roundtrip(tmp_path):
    net = PolicyNet(4, 2, 3, width=8, seed=5, out_scale=1.0)
    save_checkpoint(tmp_path / "a.npz", {"policy": net}, {"k": 1})
    save_checkpoint(tmp_path / "b.npz", {"policy": net}, {"k": 1})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    arch, params = load_checkpoint(tmp_path / "a.npz")
    other = PolicyNet(4, 2, 3, width=8, seed=9)
    other.load_params(params["policy"])
    assert np.array_equal(other.table(), net.table()) and arch["meta"]["k"] == 1
