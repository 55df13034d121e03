"""
Fast invariant checks exposed through ``kernmdp selftest``.

Each check returns ``(ok, detail)``; :func:`run_selftest` runs them all.
"""

from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path

import numpy as np

from .agents import AgentConfig
from .env import MdpSpec, oracle_value
from .features import build_qff, empty_dictionary, qff_error_bound, resample_dictionary
from .harness import EnvConfig, ExperimentConfig, build_env, evaluate_policy_value, run_experiment
from .kernels import GramState, KernelSpec, exact_posterior, gram, transition_kernel
from .planner import PlannerGrid, PlausibleSet, optimistic_value_iterate, value_iterate
from .regression import ConfidenceChannel, extend_inputs

__all__ = ["CHECKS", "run_selftest", "brute_force_values"]


def check_qff_bound(n_pairs=2000, seed=0):
    l, q, m = 0.5, 2, 8
    fmap = build_qff(l, q, m)
    rng = np.random.default_rng(seed)
    x, y = rng.random((n_pairs, q)), rng.random((n_pairs, q))
    exact = np.exp(-((x - y) ** 2).sum(1) / (2 * l * l))
    approx = (fmap.embed(x) * fmap.embed(y)).sum(1)
    err = float(np.abs(exact - approx).max())
    bound = qff_error_bound(l, q, m)
    return err <= min(bound, 1e-4), f"max error {err:.2e}, bound {bound:.2e}"


def check_nystrom_exact(seed=0):
    rng = np.random.default_rng(seed)
    k = KernelSpec.se(0.3)
    x = rng.random((40, 2))
    y = np.sin(3 * x[:, 0]) + 0.1 * rng.standard_normal(40)
    xq = rng.random((50, 2))
    ch = ConfidenceChannel("reward", 1, horizon=5, feature_map=empty_dictionary(k, 2), kernel=k,
                           noise_scale=0.1, rkhs_bound=1.0, epsilon=0.5, delta=0.1)
    ch.feature_map = resample_dictionary(x, np.ones(40), 1.0, rng, k)
    ch.refit(x, y)
    mu, sd = ch.predict(xq)
    mu0, var0 = exact_posterior(GramState.build(k, x, 5.0), y, xq, k)
    err = max(float(np.abs(mu - mu0).max()), float(np.abs(sd**2 - var0).max()))
    return err < 1e-8, f"sup error {err:.2e}"


def brute_force_values(reward, transition, horizon, grid):
    """``V_1`` at every node, maximised over all deterministic policy tables.

    All ``A^(N H)`` tables are evaluated at once with the same mean-state
    interpolation backup that the planner uses.
    """
    n, a = grid.n_nodes, grid.n_actions
    z = grid.state_actions()
    r = np.asarray(reward(z), dtype=float).reshape(n, a)
    nxt = np.asarray(transition(z), dtype=float).reshape(len(z), -1)
    # interpolation weights: column j is the response to the j-th unit table
    w = np.stack([grid.interpolate(e, nxt) for e in np.eye(n)], axis=1).reshape(n, a, n)
    tables = np.array(list(itertools.product(range(a), repeat=n * horizon))).reshape(-1, horizon, n)
    nodes = np.arange(n)
    v = np.zeros((tables.shape[0], n))
    for h in range(horizon - 1, -1, -1):
        act = tables[:, h, :]
        future = np.einsum("pij,pj->pi", w[nodes, act], v) if h < horizon - 1 else 0.0
        v = r[nodes, act] + future
    return v.max(axis=0)


def check_planner_bruteforce(n_instances=10, seed=0):
    rng = np.random.default_rng(seed)
    grid = PlannerGrid.uniform(1, 3, np.array([[0.0], [1.0]]))
    worst = 0.0
    for _ in range(n_instances):
        r_tab = rng.standard_normal(6)
        p_tab = rng.random(6)
        z = grid.state_actions()

        def lookup(tab, zz, z=z):
            idx = [int(np.argmin(np.abs(z - row).sum(1))) for row in np.atleast_2d(zz)]
            return tab[idx]

        def reward(zz):
            return lookup(r_tab, zz)

        def transition(zz):
            return lookup(p_tab, zz)[:, None]

        dp = value_iterate(reward, transition, 3, grid).values[0]
        bf = brute_force_values(reward, transition, 3, grid)
        worst = max(worst, float(np.abs(dp - bf).max()))
    return worst <= 1e-10, f"max |DP - enumeration| = {worst:.1e}"


def check_zero_width_planner(seed=0):
    rng = np.random.default_rng(seed)
    k = KernelSpec.se(0.3)
    spec = MdpSpec(horizon=3, n_state_nodes=7, n_actions_per_dim=3)
    grid = spec.planner_grid()
    common = dict(horizon=3, noise_scale=0.1, rkhs_bound=1.0, epsilon=0.5, delta=0.1)
    z = rng.random((30, 2))
    ch_r = ConfidenceChannel("reward", 1, feature_map=resample_dictionary(z, np.ones(30), 1.0, rng, k), kernel=k, **common)
    kp = transition_kernel(k, 2)
    ch_p = ConfidenceChannel("transition", 1, feature_map=resample_dictionary(extend_inputs(z, 1), np.ones(30), 1.0, rng, kp),
                             kernel=kp, **common)
    ch_r.refit(z, np.sin(z[:, 0]))
    ch_p.refit(z, 0.5 + 0.2 * np.cos(z[:, 1]))
    opt = optimistic_value_iterate(PlausibleSet(ch_r, ch_p, 2.0, 1e9, 0.0, 0.0), 3, grid)
    plain = value_iterate(lambda zz: ch_r.predict(zz)[0], lambda zz: ch_p.predict(zz)[0], 3, grid)
    err = float(np.abs(opt.values - plain.values).max())
    return err < 1e-12, f"max value difference {err:.1e}"


def check_oracle_self_consistency(seed=0):
    env_cfg = EnvConfig(spec=MdpSpec(episodes=2, n_state_nodes=21))
    env = build_env(env_cfg, seed)
    _, pi = oracle_value(env)
    gap = abs(evaluate_policy_value(env, pi) - pi.value(env.initial_state, 0))
    return gap <= 1e-10, f"|V(pi*) - V*| = {gap:.1e}"


def check_gram_psd(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((60, 3))
    worst = np.inf
    for spec in (KernelSpec.se(0.3), KernelSpec.matern(0.3, 1.5), KernelSpec.additive(
            [KernelSpec.se(0.4, slice=(0, 2)), KernelSpec.matern(0.5, 0.5, slice=(2, 3))])):
        worst = min(worst, float(np.linalg.eigvalsh(gram(spec, x)).min()))
    return worst > -1e-8, f"smallest eigenvalue {worst:.1e}"


def check_csv_determinism():
    cfg = ExperimentConfig(
        env=EnvConfig(spec=MdpSpec(n_state_nodes=11, n_actions_per_dim=5)),
        agents=[AgentConfig("ucrl_nystrom"), AgentConfig("psrl"), AgentConfig("random")],
        seeds=[0], episodes=3, write_episodes=False,
    )
    texts = []
    with tempfile.TemporaryDirectory() as tmp:
        for rep in range(2):
            out = Path(tmp) / f"r{rep}"
            run_experiment(cfg, out)
            texts.append({p.name: p.read_bytes() for p in sorted((out / "cells").glob("*.csv"))})
    same = texts[0] == texts[1] and len(texts[0]) == 3
    return same, f"{len(texts[0])} CSVs compared"


CHECKS = {
    "qff_uniform_error": check_qff_bound,
    "nystrom_full_dictionary_is_exact": check_nystrom_exact,
    "planner_matches_enumeration": check_planner_bruteforce,
    "zero_width_optimism_is_plain": check_zero_width_planner,
    "oracle_self_consistency": check_oracle_self_consistency,
    "gram_psd": check_gram_psd,
    "csv_determinism": check_csv_determinism,
}


def run_selftest(names=None, stream=None) -> bool:
    """Run the selected checks, print one line each, return overall success."""
    import sys

    stream = stream or sys.stdout
    ok_all = True
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.2f}s)", file=stream)
    return ok_all
