import logging

import numpy as np
import pytest

from safe_exploration import envs, rl


def _agent(rng, hidden=(16, 16), **kw):
    cfg = rl.DdpgConfig(hidden=hidden, **kw)
    return rl.DdpgAgent(2, 1, 2.0, rng, cfg, envs.pendulum_features, 3)


def _batch(rng, size=64):
    x = rng.uniform(-4, 4, (size, 2))
    u = rng.uniform(-2, 2, (size, 1))
    c = rng.uniform(0, 10, size)
    xn = x + rng.normal(0, 0.3, (size, 2))
    return x, u, c, xn


def test_mlp_forward_by_hand():
    rng = np.random.default_rng(0)
    net = rl.Mlp([2, 3, 1], rng)
    W1, b1, W2, b2 = net.params
    X = np.array([[0.5, -1.0]])
    expected = np.maximum(X @ W1 + b1, 0) @ W2 + b2
    np.testing.assert_allclose(net(X), expected)
    tnet = rl.Mlp([2, 3, 1], rng, "tanh", 2.0, final_init=3e-3)
    assert np.all(np.abs(tnet.params[-1]) <= 3e-3)
    assert np.all(np.abs(tnet(rng.normal(size=(10, 2)) * 100)) <= 2.0)
    with pytest.raises(ValueError):
        rl.Mlp([2, 1], rng, "relu")


@pytest.mark.parametrize("seed", range(3))
def test_critic_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    agent = _agent(rng)
    batch = _batch(rng)
    _, g = agent.critic_loss_and_grads(batch)
    num = rl.finite_difference_grads(lambda: agent.critic_loss_and_grads(batch)[0], agent.critic.params)
    assert max(rl.gradient_relative_errors(g, num)) <= 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_actor_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(10 + seed)
    agent = _agent(rng)
    # a larger final layer keeps the tanh away from its flat region for a meaningful check
    agent.actor.params[-2][...] = rng.uniform(-0.3, 0.3, agent.actor.params[-2].shape)
    batch = _batch(rng)
    _, g = agent.actor_objective_and_grads(batch)
    num = rl.finite_difference_grads(lambda: -agent.actor_objective_and_grads(batch)[0], agent.actor.params)
    assert max(rl.gradient_relative_errors(g, num)) <= 1e-4


def test_input_gradient_of_mlp():
    rng = np.random.default_rng(4)
    net = rl.Mlp([3, 8, 2], rng, "tanh", 1.5)
    X = rng.normal(size=(5, 3))
    dout = rng.normal(size=(5, 2))
    _, acts = net.forward(X)
    _, dX = net.backward(acts, dout)
    num = rl.finite_difference_grads(lambda: float(np.sum(net(X) * dout)), [X])[0]
    np.testing.assert_allclose(dX, num, rtol=1e-6, atol=1e-8)


def test_soft_update_extremes(rng):
    agent = _agent(rng, tau=0.0)
    before = [p.copy() for p in agent.target_critic.params]
    for p in agent.critic.params:
        p += 1.0
    agent.soft_update()
    for a, b in zip(before, agent.target_critic.params):
        np.testing.assert_array_equal(a, b)
    agent.cfg.tau = 1.0
    agent.soft_update()
    for a, b in zip(agent.critic.params, agent.target_critic.params):
        np.testing.assert_array_equal(a, b)


def test_soft_update_mixes(rng):
    agent = _agent(rng, tau=0.25)
    src = [p.copy() for p in agent.actor.params]
    tgt = [p.copy() - 1.0 for p in agent.actor.params]
    for p, t in zip(agent.target_actor.params, tgt):
        p[...] = t
    agent.soft_update()
    for s, t, got in zip(src, tgt, agent.target_actor.params):
        np.testing.assert_allclose(got, 0.75 * t + 0.25 * s)


def test_replay_buffer_ring_and_sampling(rng):
    buf = rl.ReplayBuffer(3, 2, 1)
    for i in range(5):
        buf.store([i, i], [i], float(i), [i + 1, i + 1])
    assert len(buf) == 3
    assert sorted(buf.c.tolist()) == [2.0, 3.0, 4.0]
    x, u, c, xn = buf.sample(3, rng)
    assert sorted(c.tolist()) == [2.0, 3.0, 4.0]
    np.testing.assert_array_equal(x[:, 0], c)
    with pytest.raises(ValueError):
        buf.sample(4, rng)
    with pytest.raises(ValueError):
        rl.ReplayBuffer(0, 2, 1)


def test_train_step_skips_small_buffer(rng, caplog):
    agent = _agent(rng)
    buf = rl.ReplayBuffer(100, 2, 1)
    buf.store([0, 0], [0], 1.0, [0, 0])
    with caplog.at_level(logging.WARNING):
        assert agent.train_step(buf, rng) is None
    assert "skipping" in caplog.text


def test_train_step_reduces_critic_loss(rng):
    agent = _agent(rng, hidden=(32, 32))
    buf = rl.ReplayBuffer(1000, 2, 1)
    for row in zip(*_batch(rng, 256)):
        buf.store(*row)
    first = agent.critic_loss_and_grads((buf.x, buf.u, buf.c, buf.x_next))[0]
    for _ in range(300):
        agent.train_step(buf, rng)
    assert agent.critic_loss_and_grads((buf.x[:256], buf.u[:256], buf.c[:256], buf.x_next[:256]))[0] < first


def test_zero_learning_rate_is_frozen(rng):
    agent = _agent(rng, actor_lr=0.0, critic_lr=0.0, tau=0.0)
    before = [p.copy() for p in agent.actor.params + agent.critic.params]
    buf = rl.ReplayBuffer(100, 2, 1)
    for row in zip(*_batch(rng, 80)):
        buf.store(*row)
    agent.train_step(buf, rng)
    for a, b in zip(before, agent.actor.params + agent.critic.params):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_round_trip(tmp_path, rng):
    agent = _agent(rng)
    path = tmp_path / "agent.ckpt"
    agent.save(path)
    other = _agent(np.random.default_rng(999))
    other.load(path)
    for (_, a), (_, b) in zip(agent._named_tensors(), other._named_tensors()):
        np.testing.assert_array_equal(a, b)
    x = np.array([0.3, -1.0])
    np.testing.assert_array_equal(agent.policy_mean(x), other.policy_mean(x))


def test_checkpoint_rejects_mismatch(tmp_path, rng):
    path = tmp_path / "agent.ckpt"
    _agent(rng).save(path)
    with pytest.raises(ValueError):
        _agent(rng, hidden=(8, 8)).load(path)
    bad = tmp_path / "bad.ckpt"
    bad.write_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        _agent(rng).load(bad)


def test_episode_return():
    disc, total = rl.episode_return([1.0, 2.0, 3.0], 0.5)
    assert disc == pytest.approx(1.0 + 1.0 + 0.75)
    assert total == 6.0
