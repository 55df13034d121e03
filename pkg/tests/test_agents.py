import math

import numpy as np
import pytest

from kernmdp.agents import AgentConfig, KernelUcrl, Psrl, RandomAgent, make_agent
from kernmdp.env import MdpSpec, synthesize_mdp
from kernmdp.features import QffMap
from kernmdp.kernels import KernelSpec
from kernmdp.planner import value_iterate
from kernmdp.regression import qff_width

SPEC = MdpSpec(horizon=3, n_state_nodes=11, n_actions_per_dim=5, episodes=10)
K = KernelSpec.se(0.3)


@pytest.fixture(scope="module")
def env():
    return synthesize_mdp(SPEC, K, K, 1.0, 1.0, 10, np.random.default_rng(0))


def run(agent, n, seed=0):
    rng = np.random.default_rng(seed)
    return [agent.run_episode(i + 1, rng) for i in range(n)]


def test_first_episode_has_empty_dictionary(env):
    agent = make_agent(AgentConfig("ucrl_nystrom"), env, np.random.default_rng(1))
    assert isinstance(agent, KernelUcrl)
    log = run(agent, 1)[0]
    assert log.d_R == 0 and log.d_P == 0
    assert log.covered_R and log.covered_P
    assert np.isfinite(log.beta_R) and log.beta_R > 0
    assert log.states.shape == (SPEC.horizon + 1, 1)
    assert agent.t == SPEC.horizon


def test_dictionary_grows_and_widths_never_shrink(env):
    agent = make_agent(AgentConfig("ucrl_nystrom"), env, np.random.default_rng(1))
    logs = run(agent, 6)
    d = [lg.d_R for lg in logs]
    assert d[0] == 0 and all(0 < x <= SPEC.horizon * i for i, x in enumerate(d[1:], 1))
    for key in ("beta_R", "beta_P"):
        b = [getattr(lg, key) for lg in logs]
        assert all(b2 >= b1 for b1, b2 in zip(b, b[1:]))
    assert all(lg.covered_R and lg.covered_P for lg in logs)


def test_information_tracking_toggle(env):
    on = run(make_agent(AgentConfig("ucrl_nystrom"), env, np.random.default_rng(1)), 3)
    off = run(make_agent(AgentConfig("ucrl_nystrom", track_information=False), env, np.random.default_rng(1)), 3)
    assert math.isnan(on[0].gamma_hat_R) and on[2].gamma_hat_R > on[1].gamma_hat_R > 0
    assert all(math.isnan(lg.gamma_hat_R) for lg in off)
    # information tracking must not perturb the trajectory
    np.testing.assert_array_equal(on[2].states, off[2].states)


@pytest.mark.parametrize("mode", ["ucrl_nystrom", "ucrl_qff", "psrl", "random"])
def test_runs_are_deterministic(env, mode):
    cfg = AgentConfig(mode, qff_nodes=10 if mode == "ucrl_qff" else None)
    a = run(make_agent(cfg, env, np.random.default_rng(4)), 3, seed=5)
    b = run(make_agent(cfg, env, np.random.default_rng(4)), 3, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.states, y.states)
        np.testing.assert_array_equal(x.rewards, y.rewards)


def test_qff_mode_recomputes_widths(env):
    agent = make_agent(AgentConfig("ucrl_qff", qff_nodes=6), env, np.random.default_rng(0))
    assert isinstance(agent.ch_R.feature_map, QffMap)
    logs = run(agent, 3)
    ch = agent.ch_R
    expect = qff_width(ch.noise_scale, ch.ridge, ch.delta, ch.posterior.logdet_ratio, ch.rkhs_bound)
    # the last logged width used the posterior before the final episode's data
    assert logs[-1].beta_R <= expect + 1e-12
    assert ch.slack == pytest.approx(1.0 / SPEC.T)
    assert {lg.d_R for lg in logs} == {ch.feature_map.dim}


def test_qff_needs_se_kernel(env):
    with pytest.raises(ValueError):
        make_agent(AgentConfig("ucrl_qff", kernel_R=KernelSpec.matern(0.3, 1.5)), env, np.random.default_rng(0))


def test_psrl_without_posterior_noise_is_certainty_equivalent(env):
    agent = make_agent(AgentConfig("psrl", posterior_noise=0.0), env, np.random.default_rng(0))
    assert isinstance(agent, Psrl)
    run(agent, 3)
    agent.prepare()
    reward, transition = agent.sampled_model()
    mean_r = lambda z: agent.ch_R.predict(z)[0]
    mean_p = lambda z: agent.ch_P.predict(z)[0]
    z = agent.grid.state_actions()
    np.testing.assert_allclose(reward(z), mean_r(z), atol=1e-10)
    np.testing.assert_allclose(transition(z), mean_p(z), atol=1e-10)
    a = value_iterate(reward, transition, SPEC.horizon, agent.grid)
    b = value_iterate(mean_r, mean_p, SPEC.horizon, agent.grid)
    np.testing.assert_allclose(a.values, b.values, atol=1e-9)


def test_psrl_samples_have_posterior_moments(env):
    agent = make_agent(AgentConfig("psrl", features="qff", qff_nodes=4), env, np.random.default_rng(0))
    run(agent, 4)
    agent.prepare()
    ch = agent.ch_R
    post = ch.posterior
    draws = np.array([agent.sample_theta(ch, 0.1) for _ in range(20_000)])
    z = np.array([[0.3, 0.7]])
    f = draws @ ch.features(z)[0]
    mean = float(ch.features(z)[0] @ post.theta)
    w = post.whiten(ch.features(z))
    var = 0.01 * float((w * w).sum())
    assert abs(f.mean() - mean) <= 4 * math.sqrt(var / len(f))
    assert f.var() == pytest.approx(var, rel=0.05)


def test_random_agent_uses_grid_actions(env):
    agent = make_agent(AgentConfig("random"), env, np.random.default_rng(0))
    assert isinstance(agent, RandomAgent)
    logs = run(agent, 5)
    acts = np.concatenate([lg.actions for lg in logs])
    assert set(np.round(acts[:, 0], 12)) <= set(np.round(agent.grid.actions[:, 0], 12))
    assert len(set(acts[:, 0])) > 1


def test_episode_log_record(env):
    log = run(make_agent(AgentConfig("ucrl_nystrom"), env, np.random.default_rng(0)), 1)[0]
    rec = log.to_record()
    assert rec["l"] == 1 and rec["gamma_hat_R"] is None
    assert len(rec["rewards"]) == SPEC.horizon
    assert log.episode_return == pytest.approx(sum(log.rewards))


@pytest.mark.parametrize("kw", [
    dict(mode="greedy"), dict(delta=0.0), dict(delta=1.0), dict(eps_R=1.0), dict(eps_P=0.0), dict(features="rff"),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AgentConfig(**kw)


def test_config_roundtrip_and_constants():
    cfg = AgentConfig("ucrl_nystrom", name="u", kernel_R=KernelSpec.matern(0.2, 2.5), eps_R=0.25)
    assert AgentConfig.from_dict(cfg.to_dict()) == cfg
    lam_r, eta_r, lam_p, _ = cfg.constants(1000)
    assert lam_r == pytest.approx(1.25 / 0.75) and lam_p == pytest.approx(3.0)
    assert eta_r == pytest.approx(6 * lam_r * math.log(12 * 1000 / 0.1) / 0.25**2)


def test_oversized_qff_schedule_is_rejected():
    big = synthesize_mdp(MdpSpec(episodes=200), K, K, 1.0, 1.0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError, match="qff_nodes"):
        make_agent(AgentConfig("ucrl_qff"), big, np.random.default_rng(0))
    agent = make_agent(AgentConfig("ucrl_qff", qff_nodes=12), big, np.random.default_rng(0))
    assert agent.ch_R.feature_map.dim == 2 * 12**2
