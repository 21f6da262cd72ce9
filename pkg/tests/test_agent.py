"""Penalty algebra, loss wiring, and training-loop plumbing."""

import numpy as np
import pytest

from flowcritic.data import BanditEnv, make_bandit_dataset
from flowcritic.agent import (
    CriticPair,
    Agent,
    AgentConfig,
    OneStepActor,
    ReplayBuffer,
    TrainingError,
    actor_loss,
    critic_loss,
    epsilon_threshold,
    penalty_weight,
    penalty_weight_variant,
    precompute_densities,
    train_offline,
    train_online_finetune,
)
from flowcritic.flow import VelocityProxy, euler_sample, log_density_exact
from flowcritic.nn import AdamState, Tensor, adam_step, analytic_gradients, zero_grads
from flowcritic.nn.tensor import slice_cols, tsum


def _tiny_config(**kw):
    base = dict(
        gamma=0.0,
        steps=10,
        batch_size=32,
        actor_widths=(16, 16),
        critic_widths=(16, 16),
        proxy_widths=(16, 16),
        proxy_steps=30,
        log_every=5,
    )
    base.update(kw)
    return AgentConfig(**base)


def _tiny_agent(rng, state_dim=1, action_dim=1, **kw):
    cfg = _tiny_config(**kw)
    return Agent(
        actor=OneStepActor(state_dim, action_dim, cfg.actor_widths, rng),
        critics=CriticPair(state_dim, action_dim, cfg.critic_widths, rng, aggregation=cfg.aggregation),
        config=cfg,
    )


# -- penalty weight -----------------------------------------------------------


def test_penalty_weight_exact_points():
    assert penalty_weight(-2.0, -2.0) == 0.0
    assert penalty_weight(-2.0 + np.log(0.5), -2.0) == 0.5
    assert penalty_weight(-50.0, -3.0) == 1.0


def test_penalty_weight_range_and_monotonicity():
    rng = np.random.default_rng(0)
    log_beta = rng.uniform(-50, 0, size=500)
    log_eps = rng.uniform(-50, 0, size=500)
    w = penalty_weight(log_beta, log_eps)
    assert np.all((w >= 0) & (w <= 1))
    assert np.array_equal(w == 0.0, log_beta >= log_eps)
    below = np.sort(np.linspace(-5, -1.01, 40))
    w_below = penalty_weight(below, -1.0)
    assert np.all(np.diff(w_below) < 0)


def test_penalty_weight_variants():
    log_eps = 0.0
    ratios = np.linspace(0.02, 0.98, 49)
    log_beta = np.log(ratios)
    lin = penalty_weight_variant(log_beta, log_eps, "linear")
    con = penalty_weight_variant(log_beta, log_eps, "concave")
    cvx = penalty_weight_variant(log_beta, log_eps, "convex")
    np.testing.assert_array_equal(lin, penalty_weight(log_beta, log_eps))
    assert np.all(con >= lin) and np.all(lin >= cvx)
    for shape in ("linear", "concave", "convex"):
        assert penalty_weight_variant(0.0, 0.0, shape) == 0.0
        assert penalty_weight_variant(-60.0, 0.0, shape) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(con[ratios.searchsorted(0.5)], 1 - np.log2(1.25), rtol=1e-9)
    with pytest.raises(ValueError):
        penalty_weight_variant(0.0, 0.0, "sigmoid")


def test_epsilon_threshold_schemes():
    stored = np.array([-1.0, -3.0, -2.0])
    batch = np.array([-1.0, -2.0])
    np.testing.assert_array_equal(epsilon_threshold("dataset-wide", stored, batch), [-3.0, -3.0])
    np.testing.assert_array_equal(epsilon_threshold("batch-wide", stored, batch), [-2.0, -2.0])
    np.testing.assert_array_equal(epsilon_threshold("batch-adaptive", stored, batch), batch)
    # Against its own threshold, every dataset action gets exactly zero weight.
    eps = epsilon_threshold("batch-adaptive", None, batch)
    assert np.all(penalty_weight(batch, eps) == 0.0)
    with pytest.raises(ValueError):
        epsilon_threshold("dataset-wide", None, batch)
    with pytest.raises(ValueError):
        epsilon_threshold("global", stored, batch)


# -- networks -----------------------------------------------------------------


def test_actor_outputs_clamped():
    rng = np.random.default_rng(1)
    actor = OneStepActor(2, 3, [8], rng)
    for w in actor.net.weights:
        w.data *= 50.0
    states = rng.standard_normal((40, 2))
    a = actor.sample_np(states, rng)
    assert a.min() >= -1.0 and a.max() <= 1.0
    z = rng.standard_normal((40, 3))
    np.testing.assert_array_equal(actor.act_np(states, z), actor.forward(states, z).data)


def test_critic_pair_targets_and_aggregation():
    rng = np.random.default_rng(2)
    critics = CriticPair(2, 1, [8, 8], rng, aggregation="min")
    states = rng.standard_normal((30, 2))
    actions = rng.uniform(-1, 1, (30, 1))
    # Targets start as exact copies.
    np.testing.assert_array_equal(critics.online_np(states, actions), critics.target_np(states, actions))
    # Min aggregation never exceeds mean aggregation on the same networks.
    min_t = critics.target_np(states, actions)
    critics.aggregation = "mean"
    mean_t = critics.target_np(states, actions)
    assert np.all(min_t <= mean_t)
    critics.aggregation = "min"

    before = critics.target1.weights[0].data.copy()
    online = critics.q1.weights[0].data
    critics.q1.weights[0].data = online + 1.0
    critics.update_targets(0.25)
    np.testing.assert_allclose(
        critics.target1.weights[0].data, 0.25 * (online + 1.0) + 0.75 * before, rtol=1e-12
    )
    with pytest.raises(ValueError):
        CriticPair(2, 1, [8], rng, aggregation="max")


# -- critic loss ----------------------------------------------------------------


def _bandit_batch(rng, n=24):
    states = np.zeros((n, 1))
    actions = rng.uniform(-1, 1, (n, 1))
    return {
        "states": states,
        "actions": actions,
        "rewards": rng.normal(size=n),
        "next_states": states,
        "terminals": np.ones(n, dtype=bool),
    }


def test_critic_loss_alpha_zero_is_plain_td_bitwise():
    rng = np.random.default_rng(3)
    agent = _tiny_agent(rng, alpha=0.0)
    proxy = VelocityProxy(1, 1, [8], rng)
    batch = _bandit_batch(rng)

    params = agent.critics.params()
    loss, _ = critic_loss(agent, proxy, batch, np.full(24, -3.0), np.random.default_rng(4))
    grads = {}
    zero_grads(params)
    loss.backward()
    for k, p in params.items():
        grads[k] = p.grad.copy()

    # Reference: regression-only tape written out by hand.
    zero_grads(params)
    y = Tensor(batch["rewards"].reshape(-1, 1))
    x = Tensor(np.concatenate([batch["states"], batch["actions"]], axis=1))
    ref = None
    for net in (agent.critics.q1, agent.critics.q2):
        td = net.forward(x) - y
        term = (td * td).sum() * (1.0 / 24)
        ref = term if ref is None else ref + term
    assert loss.item() == ref.item()
    ref.backward()
    for k, p in params.items():
        np.testing.assert_array_equal(grads[k], p.grad)


def test_critic_loss_zero_weight_matches_plain_td():
    # Threshold far below every clamped density: all weights are exactly 0,
    # so the penalized gradients coincide with plain TD.
    rng = np.random.default_rng(5)
    agent = _tiny_agent(rng, alpha=0.5)
    proxy = VelocityProxy(1, 1, [8], rng)
    batch = _bandit_batch(rng)
    params = agent.critics.params()

    zero_grads(params)
    loss, info = critic_loss(agent, proxy, batch, np.full(24, -60.0), np.random.default_rng(6))
    loss.backward()
    grads = {k: p.grad.copy() for k, p in params.items()}
    assert info["mean_w"] == 0.0

    plain = Agent(actor=agent.actor, critics=agent.critics, config=_tiny_config(alpha=0.0))
    zero_grads(params)
    ref, _ = critic_loss(plain, proxy, batch, np.full(24, -60.0), np.random.default_rng(6))
    ref.backward()
    for k, p in params.items():
        np.testing.assert_array_equal(grads[k], p.grad)


def test_critic_loss_replay_with_discount():
    rng = np.random.default_rng(7)
    agent = _tiny_agent(rng, state_dim=2, alpha=0.7, gamma=0.9, aggregation="min")
    proxy = VelocityProxy(2, 1, [8], rng)
    n = 16
    batch = {
        "states": rng.standard_normal((n, 2)),
        "actions": rng.uniform(-1, 1, (n, 1)),
        "rewards": rng.normal(size=n),
        "next_states": rng.standard_normal((n, 2)),
        "terminals": rng.uniform(size=n) < 0.3,
    }
    log_eps = np.full(n, -2.0)
    loss, _ = critic_loss(agent, proxy, batch, log_eps, np.random.default_rng(8))

    replay = np.random.default_rng(8)
    z1 = replay.standard_normal((n, 1))
    a_pi = agent.actor.act_np(batch["states"], z1)
    log_beta = log_density_exact(proxy, batch["states"], a_pi, n_steps=10)
    w = np.maximum(0.0, 1.0 - np.exp(log_beta - log_eps))
    z2 = replay.standard_normal((n, 1))
    a_next = agent.actor.act_np(batch["next_states"], z2)
    y = batch["rewards"] + 0.9 * (1.0 - batch["terminals"]) * agent.critics.target_np(
        batch["next_states"], a_next
    )
    want = 0.0
    for net in (agent.critics.q1, agent.critics.q2):
        q_pi = net.forward_np(np.concatenate([batch["states"], a_pi], axis=1))[:, 0]
        q_d = net.forward_np(np.concatenate([batch["states"], batch["actions"]], axis=1))[:, 0]
        want += 0.7 * np.mean(w * q_pi) + np.mean((q_d - y) ** 2)
    np.testing.assert_allclose(loss.item(), want, rtol=1e-12)


def test_critic_loss_nan_raises():
    rng = np.random.default_rng(9)
    agent = _tiny_agent(rng)
    agent.critics.q1.weights[0].data[0, 0] = np.nan
    proxy = VelocityProxy(1, 1, [8], rng)
    with pytest.raises(TrainingError):
        critic_loss(agent, proxy, _bandit_batch(rng), np.full(24, -3.0), rng)


# -- actor loss -----------------------------------------------------------------


def test_actor_loss_replay():
    rng = np.random.default_rng(10)
    agent = _tiny_agent(rng, lam=0.3, q_norm=True, aggregation="min")
    proxy = VelocityProxy(1, 1, [8], rng)
    batch = _bandit_batch(rng, n=16)
    loss, _ = actor_loss(agent, proxy, batch, np.random.default_rng(11))

    z = np.random.default_rng(11).standard_normal((16, 1))
    a_proxy = np.clip(euler_sample(proxy, batch["states"], z, n_steps=10), -1, 1)
    a_theta = agent.actor.act_np(batch["states"], z)
    x = np.concatenate([batch["states"], a_theta], axis=1)
    q = np.minimum(agent.critics.q1.forward_np(x), agent.critics.q2.forward_np(x))[:, 0]
    denom = np.abs(q).mean()
    want = -np.mean(q / denom) + 0.3 * np.mean(((a_theta - a_proxy) ** 2).sum(axis=1))
    np.testing.assert_allclose(loss.item(), want, rtol=1e-12)


class _BowlCritic:
    """Stand-in critic computing Q = -|a|^2 on the tape."""

    def __init__(self, state_dim, action_dim):
        self.state_dim = state_dim
        self.action_dim = action_dim

    def forward(self, x):
        a = slice_cols(x, self.state_dim, self.state_dim + self.action_dim)
        return tsum(a * a, axis=1, keepdims=True) * (-1.0)


def test_actor_loss_quadratic_bowl_pulls_actions_to_zero():
    rng = np.random.default_rng(12)
    agent = _tiny_agent(rng, lam=0.0, q_norm=False)
    bowl = _BowlCritic(1, 1)
    agent.critics.q1 = bowl
    agent.critics.q2 = bowl
    proxy = VelocityProxy(1, 1, [8], rng)
    states = np.zeros((64, 1))
    batch = {"states": states}

    params = agent.actor.params()
    opt = AdamState(params)
    before = np.abs(agent.actor.sample_np(states, np.random.default_rng(13))).mean()
    for i in range(200):
        zero_grads(params)
        loss, _ = actor_loss(agent, proxy, batch, np.random.default_rng(100 + i))
        loss.backward()
        adam_step(params, opt, lr=1e-2)
    after = np.abs(agent.actor.sample_np(states, np.random.default_rng(13))).mean()
    assert after < before * 0.5


def test_actor_gradient_direction_invariant_under_critic_rescale():
    rng = np.random.default_rng(14)
    agent = _tiny_agent(rng, lam=0.1, q_norm=True)
    proxy = VelocityProxy(1, 1, [8], rng)
    batch = _bandit_batch(rng, n=32)
    params = agent.actor.params()

    g_base = analytic_gradients(lambda: actor_loss(agent, proxy, batch, np.random.default_rng(15))[0], params)
    for net in (agent.critics.q1, agent.critics.q2):
        net.weights[-1].data *= 10.0
        net.biases[-1].data *= 10.0
    g_scaled = analytic_gradients(lambda: actor_loss(agent, proxy, batch, np.random.default_rng(15))[0], params)

    flat_a = np.concatenate([g_base[k].ravel() for k in sorted(g_base)])
    flat_b = np.concatenate([g_scaled[k].ravel() for k in sorted(g_scaled)])
    cos = flat_a @ flat_b / (np.linalg.norm(flat_a) * np.linalg.norm(flat_b))
    assert cos >= 0.999


def test_actor_loss_nan_raises():
    rng = np.random.default_rng(16)
    agent = _tiny_agent(rng)
    agent.actor.net.weights[0].data[0, 0] = np.nan
    proxy = VelocityProxy(1, 1, [8], rng)
    with pytest.raises(TrainingError):
        actor_loss(agent, proxy, _bandit_batch(rng), rng)


# -- config validation ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        _tiny_config(gamma=1.0)
    with pytest.raises(ValueError):
        _tiny_config(alpha=-0.1)
    with pytest.raises(ValueError):
        _tiny_config(eps_scheme="per-state")
    with pytest.raises(ValueError):
        _tiny_config(lam=float("inf"))


# -- densities and training loops ---------------------------------------------------


def test_precompute_densities_pure_and_complete():
    rng = np.random.default_rng(17)
    data = make_bandit_dataset(120, rng)
    proxy = VelocityProxy(1, 1, [8], rng)
    once = precompute_densities(proxy, data, chunk=50)
    again = precompute_densities(proxy, once, chunk=50)
    assert len(once.log_density) == len(data)
    np.testing.assert_array_equal(once.log_density, again.log_density)
    # Different chunking reorders BLAS blocks; agreement is then to rounding.
    other = precompute_densities(proxy, data, chunk=7)
    np.testing.assert_allclose(once.log_density, other.log_density, atol=1e-12)
    eps = epsilon_threshold("dataset-wide", once.log_density, once.log_density[:5])
    assert eps[0] == once.log_density.min()


def test_train_offline_smoke():
    rng = np.random.default_rng(18)
    data = make_bandit_dataset(200, rng)
    agent, proxy, metrics = train_offline(data, _tiny_config(steps=12, log_every=4), rng)
    steps = [m["step"] for m in metrics]
    assert steps == sorted(steps) and steps[-1] == 12
    for m in metrics:
        assert np.isfinite(m["critic_loss"]) and np.isfinite(m["actor_loss"])
        assert 0.0 <= m["mean_w"] <= 1.0
    a = agent.actor.sample_np(np.zeros((50, 1)), rng)
    assert a.min() >= -1 and a.max() <= 1


def test_online_finetune_replay_bookkeeping():
    rng = np.random.default_rng(19)
    data = make_bandit_dataset(150, rng)
    agent, proxy, _ = train_offline(data, _tiny_config(steps=5, log_every=0), rng)

    replay = ReplayBuffer(data)
    env = BanditEnv(np.random.default_rng(20))
    cfg = _tiny_config(steps=8, log_every=0)
    _, metrics = train_online_finetune(agent, proxy, env, replay, cfg, rng, env_steps_per_update=3)
    assert len(replay) == 150 + 8 * 3

    # Zero env steps: pure continued offline training, replay untouched.
    replay2 = ReplayBuffer(data)
    _, _ = train_online_finetune(agent, proxy, env, replay2, cfg, rng, env_steps_per_update=0)
    assert len(replay2) == 150


def test_replay_buffer_sample_shapes():
    rng = np.random.default_rng(21)
    data = make_bandit_dataset(60, rng)
    replay = ReplayBuffer(data)
    batch = replay.sample(10, rng)
    assert batch["states"].shape == (10, 1)
    assert batch["actions"].shape == (10, 1)
    assert batch["rewards"].shape == (10,)
    assert batch["terminals"].dtype == bool
