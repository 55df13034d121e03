"""
Learning agents: Kernel-UCRL (Nystrom or QFF features), PSRL and a uniform
random baseline.

Every agent keeps the raw history ``(z, r, s')`` and is driven one episode at
a time through :meth:`Agent.run_episode`.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .env import SyntheticMdp, sample_step
from .features import build_qff, empty_dictionary, nystrom_constants, qff_schedule, resample_dictionary
from .kernels import GramState, KernelSpec, log_det_information, transition_kernel
from .planner import GridPolicy, PlausibleSet, optimistic_value_iterate, value_iterate
from .regression import ConfidenceChannel

__all__ = ["AgentConfig", "EpisodeLog", "Agent", "KernelUcrl", "Psrl", "RandomAgent", "make_agent", "MODES"]

MODES = ("ucrl_nystrom", "ucrl_qff", "psrl", "random")
# the QFF precision matrix is dense in the feature dimension
MAX_QFF_FEATURES = 4096


@dataclass
class AgentConfig:
    """Agent settings.  Constants left as ``None`` are taken from the env."""

    mode: str = "ucrl_nystrom"
    name: str | None = None
    delta: float = 0.1
    eps_R: float = 0.5
    eps_P: float = 0.5
    B_R: float | None = None
    B_P: float | None = None
    sigma_R: float | None = None
    sigma_P: float | None = None
    L: float | None = None
    kernel_R: KernelSpec | None = None
    kernel_P: KernelSpec | None = None
    features: str = "nystrom"
    qff_nodes: int | None = None
    slack_coef: float = 1.0
    cap_bonus: bool = True
    posterior_noise: float | None = None
    track_information: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for nm in ("delta", "eps_R", "eps_P"):
            v = getattr(self, nm)
            if not 0 < v < 1:
                raise ValueError(f"{nm} must lie in (0, 1), got {v}")
        if self.features not in ("nystrom", "qff"):
            raise ValueError("features must be 'nystrom' or 'qff'")

    @property
    def label(self):
        return self.name or self.mode

    @property
    def feature_kind(self):
        if self.mode == "ucrl_qff":
            return "qff"
        if self.mode == "ucrl_nystrom":
            return "nystrom"
        return self.features

    def constants(self, horizon_T: int):
        """Derived ``(lam_R, eta_R, lam_P, eta_P)``; recomputed on every call."""
        lam_r, eta_r = nystrom_constants(self.eps_R, self.delta, horizon_T)
        lam_p, eta_p = nystrom_constants(self.eps_P, self.delta, horizon_T)
        return lam_r, eta_r, lam_p, eta_p

    def to_dict(self):
        d = asdict(self)
        d["kernel_R"] = self.kernel_R.to_dict() if self.kernel_R else None
        d["kernel_P"] = self.kernel_P.to_dict() if self.kernel_P else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("kernel_R", "kernel_P"):
            if d.get(k) is not None:
                d[k] = KernelSpec.from_dict(d[k])
        return cls(**d)


@dataclass
class EpisodeLog:
    episode: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    policy_value: float = float("nan")
    d_R: int = 0
    d_P: int = 0
    beta_R: float = float("nan")
    beta_P: float = float("nan")
    gamma_hat_R: float = float("nan")
    gamma_hat_P: float = float("nan")
    covered_R: bool | None = None
    covered_P: bool | None = None
    clipped: int = 0
    wall_ms: float = 0.0
    policy: GridPolicy | None = field(default=None, repr=False)

    @property
    def horizon(self):
        return len(self.rewards)

    @property
    def trajectory(self):
        return [
            (self.states[h], self.actions[h], float(self.rewards[h]), self.states[h + 1])
            for h in range(self.horizon)
        ]

    @property
    def episode_return(self):
        return float(np.sum(self.rewards))

    def to_record(self):
        def _num(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

        return {
            "l": self.episode,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "policy_value": _num(self.policy_value),
            "d_R": self.d_R,
            "d_P": self.d_P,
            "beta_R": _num(self.beta_R),
            "beta_P": _num(self.beta_P),
            "gamma_hat_R": _num(self.gamma_hat_R),
            "gamma_hat_P": _num(self.gamma_hat_P),
            "covered_R": self.covered_R,
            "covered_P": self.covered_P,
            "clipped": self.clipped,
            "wall_ms": self.wall_ms,
        }


class Agent:
    """Shared history handling and episode execution."""

    def __init__(self, cfg: AgentConfig, env: SyntheticMdp, rng: np.random.Generator):
        self.cfg = cfg
        self.env = env
        self.rng = rng
        self.spec = env.spec
        self.grid = env.spec.planner_grid()
        q, m = env.spec.input_dim, env.spec.state_dim
        self.Z = np.zeros((0, q))
        self.R = np.zeros(0)
        self.S = np.zeros((0, m))
        self.episodes_done = 0

    @property
    def t(self):
        return self.Z.shape[0]

    def record(self, z, r, s_next):
        self.Z = np.vstack([self.Z, z])
        self.R = np.concatenate([self.R, np.atleast_1d(r)])
        self.S = np.vstack([self.S, s_next])

    def choose_action(self, policy, state, h):
        return policy.action(state, h)

    def execute(self, policy, env_rng, log_kwargs, t_start, episode):
        """Roll the policy for one episode against the env."""
        spec = self.spec
        s = self.env.initial_state.copy()
        states, actions, rewards = [s], [], []
        clipped = 0
        for h in range(spec.horizon):
            a = self.choose_action(policy, s, h)
            z = np.concatenate([s, a])
            r, s_next, c = sample_step(self.env, z, env_rng)
            clipped += int(c)
            self.record(z, r, s_next)
            states.append(s_next)
            actions.append(a)
            rewards.append(r)
            s = s_next
        self.episodes_done += 1
        return EpisodeLog(
            episode=episode,
            states=np.array(states),
            actions=np.array(actions),
            rewards=np.array(rewards),
            clipped=clipped,
            wall_ms=1000.0 * (time.perf_counter() - t_start),
            policy=policy,
            **log_kwargs,
        )

    def run_episode(self, episode: int, env_rng: np.random.Generator) -> EpisodeLog:
        raise NotImplementedError


class _ModelAgent(Agent):
    """Agents that maintain reward and transition regression channels."""

    def __init__(self, cfg, env, rng):
        super().__init__(cfg, env, rng)
        spec = env.spec
        q, m = spec.input_dim, spec.state_dim
        self.B_R = env.B_R if cfg.B_R is None else cfg.B_R
        self.B_P = env.B_P if cfg.B_P is None else cfg.B_P
        self.sigma_R = env.sigma_R if cfg.sigma_R is None else cfg.sigma_R
        self.sigma_P = env.sigma_P if cfg.sigma_P is None else cfg.sigma_P
        self.L = env.lipschitz_L if cfg.L is None else cfg.L
        self.kernel_R = cfg.kernel_R or env.reward_fn.spec
        self.kernel_Pz = cfg.kernel_P or env.transition_fn.spec
        self.kernel_P = transition_kernel(self.kernel_Pz, q)
        T = spec.T
        self.lam_R, self.eta_R, self.lam_P, self.eta_P = cfg.constants(T)

        common = dict(horizon=spec.horizon, delta=cfg.delta, horizon_T=T, slack_coef=cfg.slack_coef)
        if cfg.feature_kind == "qff":
            map_r = self._qff(self.kernel_R, q, T)
            map_p = self._qff(self.kernel_Pz, q, T)
        else:
            map_r = empty_dictionary(self.kernel_R, q, self.eta_R, self.lam_R, cfg.eps_R)
            map_p = empty_dictionary(self.kernel_P, q + 1, self.eta_P, self.lam_P, cfg.eps_P)
        self.ch_R = ConfidenceChannel("reward", 1, feature_map=map_r, kernel=self.kernel_R,
                                      noise_scale=self.sigma_R, rkhs_bound=self.B_R, epsilon=cfg.eps_R, **common)
        self.ch_P = ConfidenceChannel("transition", m, feature_map=map_p, kernel=self.kernel_P,
                                      noise_scale=self.sigma_P, rkhs_bound=self.B_P, epsilon=cfg.eps_P, **common)
        self._fitted = 0

    def _qff(self, kernel, q, T):
        if kernel.family != "se" or (kernel.slice is not None and kernel.slice != (0, q)):
            raise ValueError("QFF features need a plain SE kernel over the state-action input")
        nodes = self.cfg.qff_nodes or qff_schedule(kernel.lengthscale, q, max(T, 2))
        if 2 * nodes**q > MAX_QFF_FEATURES:
            raise ValueError(
                f"QFF map with {nodes} nodes per dimension over {q} inputs has {2 * nodes**q} features "
                f"(limit {MAX_QFF_FEATURES}); set qff_nodes explicitly or shorten the horizon T = {T}"
            )
        return build_qff(kernel.lengthscale, q, nodes)

    def _resample(self, ch: ConfidenceChannel, eta, lam, eps, y_all):
        """New Nystrom dictionary from the whole history, then refit."""
        new_z = self.Z[self._fitted:]
        if new_z.shape[0]:
            ch.update(new_z, ch.targets(self.R[self._fitted:], self.S[self._fitted:]))
        rows = ch.rows(self.Z)
        var = ch.row_variances(rows)
        dictionary = resample_dictionary(rows, var, eta, self.rng, ch.kernel, lam, eps)
        ch.feature_map = dictionary
        ch.refit(self.Z, y_all)

    def prepare(self):
        """Refresh feature maps and posteriors from the current history."""
        if self.t == 0:
            return
        y_r = self.ch_R.targets(self.R)
        y_p = self.ch_P.targets(next_states=self.S)
        if self.cfg.feature_kind == "qff":
            new = slice(self._fitted, None)
            self.ch_R.update(self.Z[new], y_r[self._fitted:])
            m = self.spec.state_dim
            self.ch_P.update(self.Z[new], y_p[self._fitted * m:])
        else:
            self._resample(self.ch_R, self.eta_R, self.lam_R, self.cfg.eps_R, y_r)
            self._resample(self.ch_P, self.eta_P, self.lam_P, self.cfg.eps_P, y_p)
        self._fitted = self.t

    def information(self):
        """Achieved log-det information at the visited points, per channel."""
        if not self.cfg.track_information or self.t == 0:
            return float("nan"), float("nan")
        g_r = log_det_information(GramState.build(self.kernel_R, self.Z, self.ch_R.ridge))
        g_p = log_det_information(GramState.build(self.kernel_P, self.ch_P.rows(self.Z), self.ch_P.ridge))
        return g_r, g_p


class KernelUcrl(_ModelAgent):
    """Optimistic planning over the plausible set built from both channels."""

    def __init__(self, cfg, env, rng):
        super().__init__(cfg, env, rng)
        self._beta_R = 0.0
        self._beta_P = 0.0

    def coverage(self, beta_r, beta_p):
        """Do the true mean functions lie in both bands at every grid pair?"""
        z = self.grid.state_actions()
        in_r = self.ch_R.membership(self.env.mean_reward(z), z, beta_r)
        in_p = self.ch_P.membership(self.env.mean_transition(z), z, beta_p)
        return bool(np.all(in_r)), bool(np.all(in_p))

    def run_episode(self, episode, env_rng):
        t0 = time.perf_counter()
        gamma_r, gamma_p = self.information()
        self.prepare()
        # widths are kept non-decreasing across episodes
        self._beta_R = max(self._beta_R, self.ch_R.compute_width())
        self._beta_P = max(self._beta_P, self.ch_P.compute_width())
        self.ch_R.width_floor, self.ch_P.width_floor = self._beta_R, self._beta_P
        plausible = PlausibleSet(self.ch_R, self.ch_P, self.L, self.B_R, self._beta_R, self._beta_P)
        policy = optimistic_value_iterate(plausible, self.spec.horizon, self.grid, cap_bonus=self.cfg.cap_bonus)
        cov_r, cov_p = self.coverage(self._beta_R, self._beta_P)
        info = dict(
            policy_value=policy.value(self.env.initial_state, 0),
            d_R=self.ch_R.dictionary_size,
            d_P=self.ch_P.dictionary_size,
            beta_R=self._beta_R,
            beta_P=self._beta_P,
            gamma_hat_R=gamma_r,
            gamma_hat_P=gamma_p,
            covered_R=cov_r,
            covered_P=cov_p,
        )
        return self.execute(policy, env_rng, info, t0, episode)


class Psrl(_ModelAgent):
    """Posterior sampling in the feature space of the regression channels."""

    def sample_theta(self, ch: ConfidenceChannel, noise: float):
        post = ch.posterior
        if post.dim == 0:
            return np.zeros(0)
        xi = self.rng.standard_normal(post.dim)
        if noise == 0:
            return post.theta.copy()
        return post.theta + noise * linalg.solve_triangular(post.chol.T, xi, lower=False)

    def sampled_model(self):
        noise_r = self.sigma_R if self.cfg.posterior_noise is None else self.cfg.posterior_noise
        noise_p = self.sigma_P if self.cfg.posterior_noise is None else self.cfg.posterior_noise
        th_r = self.sample_theta(self.ch_R, noise_r)
        th_p = self.sample_theta(self.ch_P, noise_p)
        m = self.spec.state_dim
        ch_r, ch_p = self.ch_R, self.ch_P

        def reward(z):
            return ch_r.features(z) @ th_r

        def transition(z):
            return (ch_p.features(z) @ th_p).reshape(-1, m)

        return reward, transition

    def run_episode(self, episode, env_rng):
        t0 = time.perf_counter()
        gamma_r, gamma_p = self.information()
        self.prepare()
        reward, transition = self.sampled_model()
        policy = value_iterate(reward, transition, self.spec.horizon, self.grid)
        info = dict(
            policy_value=policy.value(self.env.initial_state, 0),
            d_R=self.ch_R.dictionary_size,
            d_P=self.ch_P.dictionary_size,
            gamma_hat_R=gamma_r,
            gamma_hat_P=gamma_p,
        )
        return self.execute(policy, env_rng, info, t0, episode)


class RandomAgent(Agent):
    """Uniformly random grid action at every step."""

    def choose_action(self, policy, state, h):
        return self.grid.actions[self.rng.integers(self.grid.n_actions)]

    def run_episode(self, episode, env_rng):
        t0 = time.perf_counter()
        return self.execute(None, env_rng, {}, t0, episode)


def make_agent(cfg: AgentConfig, env: SyntheticMdp, rng: np.random.Generator) -> Agent:
    if cfg.mode == "random":
        return RandomAgent(cfg, env, rng)
    if cfg.mode == "psrl":
        return Psrl(cfg, env, rng)
    return KernelUcrl(cfg, env, rng)
