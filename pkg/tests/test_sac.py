import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from donkeysac import numcore as nc
from donkeysac import sac, vae
from donkeysac.numcore import SeededRng, Tape, Tensor, backward
from helpers import central_diff, rel_err

TINY_VAE = vae.VaeConfig(image_size=8, channels=(2, 2, 2), strides=(2, 1, 1), latent_dim=2)


def make_critics(state_dim=3, action_dim=1, hidden=8, seed=0, single=False):
    return sac.Critics(state_dim, action_dim, hidden, SeededRng(seed), "float64", single)


def set_constant(net: sac.Mlp, value: float):
    """Zero every weight; the output layer bias carries the constant."""
    for w, b in net.layers:
        w.data[...] = 0.0
        b.data[...] = 0.0
    net.layers[-1][1].data[...] = value


def image_batch(n=4, action_dim=1, history=2, seed=0, terminal=None):
    g = np.random.default_rng(seed)
    return sac.Batch(
        obs=g.uniform(size=(n, 1, 8, 8)),
        history=g.uniform(-1, 1, (n, history)),
        action=g.uniform(-0.9, 0.9, (n, action_dim)),
        reward=g.choice([1.0, -10.0], n),
        next_obs=g.uniform(size=(n, 1, 8, 8)),
        next_history=g.uniform(-1, 1, (n, history)),
        terminal=np.zeros(n) if terminal is None else terminal,
    )


def tiny_agent(mode=sac.AgentMode.SCRATCH, seed=0, **cfg):
    c = sac.SacConfig(hidden=4, batch_size=4, **cfg)
    return sac.Agent(c, 1, 2, SeededRng(seed), vae_cfg=TINY_VAE, mode=mode, dtype="float64")


# ----------------------------------------------------------------- config


def test_config_validation():
    sac.SacConfig().validate()
    for bad in ({"gamma": 1.5}, {"alpha": -0.1}, {"tau": 0.0}, {"tau": 1.1}, {"batch_size": 0}, {"lr": 0.0}):
        with pytest.raises(ValueError):
            sac.SacConfig(**bad).validate()


def test_agent_state_length():
    agent = sac.Agent(sac.SacConfig(), 2, 40, SeededRng(0), vae_cfg=vae.VaeConfig(channels=(2, 2, 2)))
    assert agent.state_dim == 20 + 20 * 2
    assert len(agent.policy.net.layers) == 3
    assert agent.policy.net.layers[0][0].shape == (64, 60)
    assert len(agent.critics.q) == 2
    single = sac.Agent(sac.SacConfig(single_critic=True), 2, 40, SeededRng(0), obs_dim=20)
    assert len(single.critics.q) == 1


# ----------------------------------------------------------------- policy


def test_log_prob_at_origin_is_standard_normal_density():
    for dims in (1, 3):
        s = sac.squashed_gaussian(Tensor(np.zeros(dims)), Tensor(np.zeros(dims)), np.zeros(dims))
        assert float(s.action.data.max()) == 0.0
        # the only departure from the plain density is the 1e-6 stabiliser inside the log
        exact = dims * (-0.5 * math.log(2 * math.pi) - math.log1p(1e-6))
        assert float(s.log_prob.data) == pytest.approx(exact, abs=1e-12)
        assert float(s.log_prob.data) / dims == pytest.approx(-0.91894, abs=1e-5)


@pytest.mark.parametrize("mean,log_std", [(0.0, 0.0), (0.8, -0.5), (-1.5, 0.0), (0.3, -2.0), (0.0, 0.5)])
def test_squashed_density_integrates_to_one(mean, log_std):
    """Quadrature over the action interval of pi(a) = N(u) / (1 - tanh(u)^2 + 1e-6) * |du/da|."""

    def density(a):
        u = np.arctanh(a)
        return float(np.exp(sac.log_prob_of_pre_tanh(np.array([mean]), np.array([log_std]), np.array([u]))))

    total, _ = integrate.quad(density, -1 + 1e-15, 1 - 1e-15, limit=400, points=[math.tanh(mean)])
    assert abs(total - 1.0) < 1e-3


def test_log_prob_numpy_matches_tensor_path():
    g = np.random.default_rng(1)
    mean, log_std, noise = g.normal(size=3), g.normal(size=3) * 0.5, g.normal(size=3)
    s = sac.squashed_gaussian(Tensor(mean), Tensor(log_std), noise)
    ref = sac.log_prob_of_pre_tanh(mean, log_std, mean + np.exp(log_std) * noise)
    assert float(s.log_prob.data) == pytest.approx(float(ref), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_sampled_actions_bounded_with_finite_log_prob(seed):
    policy = sac.Policy(5, 2, 8, SeededRng(seed), "float64")
    state = Tensor(SeededRng(seed).spawn(1).normal((16, 5)) * 3)
    s = sac.sample_action(state, policy, SeededRng(seed).spawn(2))
    assert np.all(np.abs(s.action.data) < 1)
    assert np.all(np.isfinite(s.log_prob.data))


def test_deterministic_mode_is_tanh_of_mean():
    policy = sac.Policy(3, 2, 8, SeededRng(0), "float64")
    state = Tensor(np.array([0.1, -0.4, 0.9]))
    a1 = sac.sample_action(state, policy, None, deterministic=True).action.data
    a2 = sac.sample_action(state, policy, None, deterministic=True).action.data
    np.testing.assert_array_equal(a1, a2)
    mean, _ = policy(state)
    np.testing.assert_allclose(a1, np.tanh(mean.data), rtol=0, atol=1e-15)


def test_policy_rejects_wrong_state_length():
    policy = sac.Policy(3, 1, 8, SeededRng(0))
    with pytest.raises(ValueError):
        policy(Tensor(np.zeros(4)))


# ----------------------------------------------------------------- value and targets


def test_soft_value_with_constant_targets():
    critics = make_critics()
    for t in critics.targets:
        set_constant(t, 3.5)
    policy = sac.Policy(3, 1, 8, SeededRng(1), "float64")
    states = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    v = sac.soft_value(states, policy, critics, sac.SacConfig(alpha=0.0), SeededRng(2))
    np.testing.assert_array_equal(v, np.full(5, 3.5))


def test_soft_value_alpha_zero_is_min_target_q():
    critics = make_critics(seed=3)
    policy = sac.Policy(3, 1, 8, SeededRng(1), "float64")
    states = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
    v = sac.soft_value(states, policy, critics, sac.SacConfig(alpha=0.0), SeededRng(5))
    a = sac.sample_action(states, policy, SeededRng(5)).action
    q = np.minimum(*[x.data for x in critics.values(states, a, target=True)])
    np.testing.assert_array_equal(v, q)


def test_soft_value_entropy_term_scales_with_alpha():
    critics = make_critics(seed=3)
    policy = sac.Policy(3, 1, 8, SeededRng(1), "float64")
    states = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
    v0, v1, v2 = (sac.soft_value(states, policy, critics, sac.SacConfig(alpha=a), SeededRng(5))
                  for a in (0.0, 0.2, 0.4))
    np.testing.assert_allclose(v2 - v0, 2.0 * (v1 - v0), rtol=1e-12)


def test_soft_value_monte_carlo_matches_analytic_expectation():
    """Constant target Q=c: E[V] = c + alpha * entropy of the squashed Gaussian (entropy by quadrature)."""
    critics = make_critics()
    for t in critics.targets:
        set_constant(t, 2.0)
    policy = sac.Policy(3, 1, 8, SeededRng(0), "float64")
    mean_b, ls_b = 0.4, -0.3
    set_constant(policy.net, 0.0)
    policy.net.layers[-1][1].data[...] = [mean_b, ls_b]
    alpha = 0.5
    n = 10_000
    v = sac.soft_value(Tensor(np.zeros((n, 3))), policy, critics, sac.SacConfig(alpha=alpha), SeededRng(8))

    std = math.exp(ls_b)

    def integrand(u):
        logp = sac.log_prob_of_pre_tanh(np.array([mean_b]), np.array([ls_b]), np.array([u]))
        return -float(logp) * math.exp(-0.5 * ((u - mean_b) / std) ** 2) / (std * math.sqrt(2 * math.pi))

    entropy, _ = integrate.quad(integrand, mean_b - 12 * std, mean_b + 12 * std, limit=200)
    expected = 2.0 + alpha * entropy
    stderr = v.std(ddof=1) / math.sqrt(n)
    assert abs(v.mean() - expected) < 2 * stderr


def test_bellman_targets_cases():
    y = sac.bellman_targets(np.array([1.0, -10.0]), np.array([0.0, 1.0]), np.array([10.0, 55.0]), 0.99)
    assert y[0] == pytest.approx(10.9, abs=1e-12)
    assert y[1] == -10.0


def test_terminal_target_with_matching_q_has_zero_residual():
    critics = make_critics(single=True)
    set_constant(critics.q[0], -10.0)
    y = sac.bellman_targets(np.array([-10.0]), np.array([1.0]), np.array([123.0]), 0.99)
    loss = sac.critic_loss(Tensor(np.zeros((1, 3))), np.zeros((1, 1)), y, critics)
    assert float(loss.data) == 0.0


def test_critic_loss_with_zero_q_is_mean_squared_target():
    critics = make_critics()
    for q in critics.q:
        set_constant(q, 0.0)
    y = np.array([1.0, -2.0, 3.5, 0.25])
    loss = sac.critic_loss(Tensor(np.ones((4, 3))), np.zeros((4, 1)), y, critics)
    direct = sum(v * v for v in y) / len(y)
    assert float(loss.data) == pytest.approx(direct, rel=1e-14)


def test_losses_reject_empty_batch():
    critics = make_critics()
    policy = sac.Policy(3, 1, 8, SeededRng(0), "float64")
    with pytest.raises(ValueError):
        sac.critic_loss(Tensor(np.zeros((0, 3))), np.zeros((0, 1)), np.zeros(0), critics)
    with pytest.raises(ValueError):
        sac.actor_loss(Tensor(np.zeros((0, 3))), policy, critics, sac.SacConfig(), SeededRng(0))


# ----------------------------------------------------------------- gradients


def test_critic_loss_gradient_matches_finite_differences():
    critics = make_critics(seed=4)
    assert sum(p.size for p in critics.params()) <= 500
    g = np.random.default_rng(2)
    state, action, y = g.normal(size=(5, 3)), g.uniform(-1, 1, (5, 1)), g.normal(size=5)

    def value():
        with nc.no_grad():
            return float(sac.critic_loss(Tensor(state), action, y, critics).data)

    st_t = Tensor(state, requires_grad=True)
    with Tape() as tape:
        loss = sac.critic_loss(st_t, action, y, critics)
    grads = backward(loss, tape)
    params = critics.params()
    num = central_diff(value, [p.data for p in params] + [state])
    for p, n in zip(params, num):
        assert rel_err(grads[p], n) < 1e-4
    assert rel_err(grads[st_t], num[-1]) < 1e-4
    assert not any(t in grads for t in critics.target_params())


def test_actor_loss_gradient_matches_finite_differences():
    critics = make_critics(seed=4)
    policy = sac.Policy(3, 1, 8, SeededRng(6), "float64")
    assert sum(p.size for p in policy.params()) <= 500
    state = np.random.default_rng(3).normal(size=(5, 3))
    cfg = sac.SacConfig(alpha=0.3)

    def value():
        with nc.no_grad():
            return float(sac.actor_loss(Tensor(state), policy, critics, cfg, SeededRng(9)).data)

    with Tape() as tape:
        loss = sac.actor_loss(Tensor(state), policy, critics, cfg, SeededRng(9))
    grads = backward(loss, tape)
    num = central_diff(value, [p.data for p in policy.params()])
    for p, n in zip(policy.params(), num):
        assert rel_err(grads[p], n) < 1e-4


def test_joint_critic_objective_gradient_reaches_encoder():
    agent = tiny_agent()
    # terminal transitions keep the (constant) target independent of the encoder,
    # so finite differences see only the paths that carry gradient
    batch = image_batch(terminal=np.ones(4))
    enc = agent.vae.encoder_params()

    def value():
        with nc.no_grad():
            return float(agent.critic_objective(batch, SeededRng(3))[0].data)

    with Tape() as tape:
        total, _, _, _ = agent.critic_objective(batch, SeededRng(3))
    grads = backward(total, tape)
    num = central_diff(value, [p.data for p in enc])
    for p, n in zip(enc, num):
        assert rel_err(grads[p], n) < 1e-4, p.name


def test_actor_gradient_never_reaches_encoder():
    agent = tiny_agent()
    batch = image_batch()
    with Tape() as tape:
        total, _, _, emb = agent.critic_objective(batch, SeededRng(3))
    critic_grads = backward(total, tape)
    with Tape() as tape:
        j_pi = agent.actor_objective(batch, SeededRng(4), embedding=emb)
    actor_grads = backward(j_pi, tape)
    for p in agent.vae.encoder_params():
        assert np.any(critic_grads[p] != 0)
        g = nc.parameters_grad(actor_grads, [p])[0]
        assert np.all(g == 0)


def test_actor_with_constant_critic_and_no_entropy_has_no_signal():
    critics = make_critics()
    for q in critics.q:
        set_constant(q, 1.7)
    policy = sac.Policy(3, 1, 8, SeededRng(6), "float64")
    state = np.random.default_rng(3).normal(size=(5, 3))
    with Tape() as tape:
        loss = sac.actor_loss(Tensor(state), policy, critics, sac.SacConfig(alpha=0.0), SeededRng(1))
    assert float(loss.data) == pytest.approx(-1.7)
    grads = backward(loss, tape)
    for g in nc.parameters_grad(grads, policy.params()):
        assert np.abs(g).max() < 1e-12


class QuadraticCritic:
    """Q(s, a) = -a^2 for a 1-D action."""

    def min_value(self, state, action, target=False):
        return nc.reshape(-nc.square(action), (action.shape[0],))


@pytest.mark.parametrize("mean_bias", [0.6, -0.6])
def test_actor_gradient_pulls_mean_toward_quadratic_optimum(mean_bias):
    policy = sac.Policy(2, 1, 8, SeededRng(0), "float64")
    set_constant(policy.net, 0.0)
    policy.net.layers[-1][1].data[...] = [mean_bias, -1.0]
    bias = policy.net.layers[-1][1]
    with Tape() as tape:
        loss = sac.actor_loss(Tensor(np.zeros((2000, 2))), policy, QuadraticCritic(), sac.SacConfig(alpha=0.0),
                              SeededRng(2))
    g = backward(loss, tape)[bias]
    # gradient descent moves the mean head against its gradient, i.e. toward zero
    assert np.sign(g[0]) == np.sign(mean_bias)


# ----------------------------------------------------------------- soft update


def test_soft_update_full_and_partial():
    critics = make_critics()
    for q in critics.q:
        set_constant(q, 1.0)
        for w, b in q.layers:
            w.data[...] = 1.0
            b.data[...] = 1.0
    for t in critics.targets:
        for w, b in t.layers:
            w.data[...] = 0.0
            b.data[...] = 0.0
    sac.soft_update(critics, 0.005)
    for p in critics.target_params():
        np.testing.assert_allclose(p.data, 0.005, rtol=1e-12)
    sac.soft_update(critics, 1.0)
    for p, q in zip(critics.target_params(), critics.params()):
        np.testing.assert_array_equal(p.data, q.data)
    with pytest.raises(ValueError):
        sac.soft_update(critics, 0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.001, 0.5), st.integers(1, 200))
def test_soft_update_geometric_convergence(tau, n):
    critics = make_critics(seed=1)
    source = [p.data.copy() for p in critics.params()]
    gap0 = [t.data - s for t, s in zip(critics.target_params(), source)]
    for t in critics.targets:
        for w, b in t.layers:
            w.data += 1.0
            b.data -= 2.0
    gap0 = [t.data - s for t, s in zip(critics.target_params(), source)]
    for _ in range(n):
        sac.soft_update(critics, tau)
    for t, s, g in zip(critics.target_params(), source, gap0):
        np.testing.assert_allclose(t.data - s, (1 - tau) ** n * g, rtol=1e-9, atol=1e-12)


# ----------------------------------------------------------------- train_step


def test_fixed_pretrained_mode_never_changes_vae():
    agent = tiny_agent(sac.AgentMode.FIXED_PRETRAINED)
    before = agent.vae.checksum()
    actor_before = [p.data.copy() for p in agent.policy.params()]
    for k in range(100):
        agent.train_step(image_batch(seed=k), SeededRng(0).spawn(k))
    assert agent.vae.checksum() == before
    assert any(np.any(a != p.data) for a, p in zip(actor_before, agent.policy.params()))


def test_scratch_mode_moves_encoder_after_one_step():
    agent = tiny_agent(sac.AgentMode.SCRATCH)
    enc_before = [p.data.copy() for p in agent.vae.encoder_params()]
    rep = agent.train_step(image_batch(), SeededRng(0))
    assert rep.critic > 0
    assert all(np.any(b != p.data) for b, p in zip(enc_before, agent.vae.encoder_params()))


def test_train_step_smoke_losses_finite():
    agent = tiny_agent(sac.AgentMode.INIT_PRETRAINED, lr=1e-3)
    for k in range(1000):
        term = (np.arange(4) == k % 4).astype(float)
        rep = agent.train_step(image_batch(seed=k % 50, terminal=term), SeededRng(1).spawn(k))
        assert all(np.isfinite(v) for v in (rep.critic, rep.actor, rep.vae))


def test_agent_arrays_roundtrip_reproduces_updates():
    a = tiny_agent(seed=0)
    for k in range(3):
        a.train_step(image_batch(seed=k), SeededRng(0).spawn(k))
    b = tiny_agent(seed=1)
    b.load_arrays(a.arrays(), critic_t=a.critic_opt.t, actor_t=a.actor_opt.t)
    ra = a.train_step(image_batch(seed=9), SeededRng(0).spawn(9))
    rb = b.train_step(image_batch(seed=9), SeededRng(0).spawn(9))
    assert (ra.critic, ra.actor, ra.vae) == (rb.critic, rb.actor, rb.vae)
    for k, v in a.arrays().items():
        np.testing.assert_array_equal(v, b.arrays()[k])
