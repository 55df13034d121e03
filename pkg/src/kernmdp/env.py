"""
Synthetic episodic MDPs whose mean reward and transition functions are
finite kernel expansions with a prescribed RKHS norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, gram
from .planner import GridPolicy, PlannerGrid, value_iterate

__all__ = [
    "MdpSpec",
    "RkhsFunction",
    "SyntheticMdp",
    "synthesize_mdp",
    "step",
    "clip_state",
    "oracle_value",
]

NOISE_KINDS = ("gaussian", "truncated_gaussian")
BOX_TOL = 1e-9


@dataclass(frozen=True)
class MdpSpec:
    """Problem dimensions.  States live in ``[0, 1]^m``."""

    state_dim: int = 1
    action_dim: int = 1
    horizon: int = 5
    episodes: int = 200
    n_state_nodes: int = 51
    n_actions_per_dim: int = 11
    initial_state: tuple[float, ...] = (0.5,)

    def __post_init__(self):
        if self.horizon < 1 or self.episodes < 1:
            raise ValueError("horizon and episodes must be >= 1")
        if len(self.initial_state) != self.state_dim:
            raise ValueError("initial_state must have state_dim coordinates")

    @property
    def T(self):
        return self.episodes * self.horizon

    @property
    def diameter(self):
        return math.sqrt(self.state_dim)

    @property
    def input_dim(self):
        return self.state_dim + self.action_dim

    @property
    def action_grid(self) -> np.ndarray:
        axes = [np.linspace(0.0, 1.0, self.n_actions_per_dim)] * self.action_dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def planner_grid(self, n_state_nodes: int | None = None) -> PlannerGrid:
        return PlannerGrid.uniform(self.state_dim, n_state_nodes or self.n_state_nodes, self.action_grid)

    def to_dict(self):
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "horizon": self.horizon,
            "episodes": self.episodes,
            "n_state_nodes": self.n_state_nodes,
            "n_actions_per_dim": self.n_actions_per_dim,
            "initial_state": list(self.initial_state),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "initial_state" in d:
            d["initial_state"] = tuple(float(v) for v in d["initial_state"])
        return cls(**d)


@dataclass(frozen=True)
class RkhsFunction:
    """``f(z) = offset + sum_i coefficients[i] k(centers[i], z)``.

    ``norm`` is the RKHS norm of the kernel expansion, ``sqrt(tr(a^T K a))``;
    ``offset`` is a constant shift kept outside the expansion.
    """

    spec: KernelSpec
    centers: np.ndarray
    coefficients: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @property
    def n_outputs(self):
        return self.coefficients.shape[1]

    @property
    def norm(self):
        k = gram(self.spec, self.centers)
        return math.sqrt(max(float(np.trace(self.coefficients.T @ k @ self.coefficients)), 0.0))

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        out = gram(self.spec, np.atleast_2d(z), self.centers) @ self.coefficients + self.offset
        if self.n_outputs == 1:
            out = out[:, 0]
        return out[0] if single else out

    def to_dict(self):
        return {
            "kernel": self.spec.to_dict(),
            "centers": self.centers.tolist(),
            "coefficients": self.coefficients.tolist(),
            "offset": np.asarray(self.offset).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            KernelSpec.from_dict(d["kernel"]),
            np.asarray(d["centers"], dtype=float),
            np.asarray(d["coefficients"], dtype=float),
            np.asarray(d["offset"], dtype=float),
        )


@dataclass(frozen=True)
class SyntheticMdp:
    spec: MdpSpec
    reward_fn: RkhsFunction
    transition_fn: RkhsFunction
    sigma_R: float
    sigma_P: float
    noise: str
    lipschitz_L: float
    B_R: float
    B_P: float
    seed: int | None = None

    def __post_init__(self):
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise must be one of {NOISE_KINDS}")

    @property
    def initial_state(self):
        return np.asarray(self.spec.initial_state, dtype=float)

    def mean_reward(self, z):
        return self.reward_fn(z)

    def mean_transition(self, z):
        out = self.transition_fn(z)
        z = np.asarray(z)
        if z.ndim == 2 and out.ndim == 1:
            out = out[:, None]
        return out

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "reward_fn": self.reward_fn.to_dict(),
            "transition_fn": self.transition_fn.to_dict(),
            "sigma_R": self.sigma_R,
            "sigma_P": self.sigma_P,
            "noise": self.noise,
            "lipschitz_L": self.lipschitz_L,
            "B_R": self.B_R,
            "B_P": self.B_P,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            MdpSpec.from_dict(d["spec"]),
            RkhsFunction.from_dict(d["reward_fn"]),
            RkhsFunction.from_dict(d["transition_fn"]),
            float(d["sigma_R"]),
            float(d["sigma_P"]),
            d["noise"],
            float(d["lipschitz_L"]),
            float(d["B_R"]),
            float(d["B_P"]),
            d.get("seed"),
        )


def clip_state(s) -> np.ndarray:
    return np.clip(s, 0.0, 1.0)


def _random_expansion(spec, centers, n_out, target, rng, max_tries=10):
    k = gram(spec, centers)
    for _ in range(max_tries):
        alpha = rng.standard_normal((centers.shape[0], n_out))
        norm = math.sqrt(max(float(np.trace(alpha.T @ k @ alpha)), 0.0))
        if norm > 1e-12:
            return alpha * (target / norm)
    raise RuntimeError(f"degenerate coefficient draw after {max_tries} attempts")


def lipschitz_estimate(policy: GridPolicy, inflate: float = 1.5) -> float:
    """Largest finite-difference slope of the future value tables, inflated."""
    grid = policy.grid
    slope = 0.0
    for h in range(1, policy.horizon):
        v = policy.values[h].reshape(grid.shape)
        for d, nodes in enumerate(grid.state_nodes):
            if len(nodes) < 2:
                continue
            dv = np.abs(np.diff(v, axis=d))
            dx = np.diff(nodes).reshape([-1 if i == d else 1 for i in range(grid.state_dim)])
            slope = max(slope, float((dv / dx).max()))
    return inflate * slope


def synthesize_mdp(
    spec: MdpSpec,
    kernel_R: KernelSpec,
    kernel_P: KernelSpec,
    target_B_R: float,
    target_B_P: float,
    n_centers: int,
    rng: np.random.Generator,
    sigma_R: float = 0.1,
    sigma_P: float = 0.1,
    noise: str = "gaussian",
    squash_range: tuple[float, float] = (0.25, 0.75),
    seed: int | None = None,
) -> SyntheticMdp:
    """Draw a random RKHS-smooth MDP.

    Centers are uniform on ``S x A``; coefficients are Gaussian, rescaled to
    the exact target norm.  Transition means are then shrunk towards the box
    centre (never expanded) so that their range lies inside ``squash_range``,
    which keeps next-state clipping rare.
    """
    if n_centers < 1:
        raise ValueError("n_centers must be >= 1")
    q, m = spec.input_dim, spec.state_dim
    c_r = rng.random((n_centers, q))
    c_p = rng.random((n_centers, q))
    if target_B_R > 0:
        a_r = _random_expansion(kernel_R, c_r, 1, target_B_R, rng)
    else:
        a_r = np.zeros((n_centers, 1))
    if target_B_P > 0:
        a_p = _random_expansion(kernel_P, c_p, m, target_B_P, rng)
    else:
        a_p = np.zeros((n_centers, m))

    lo, hi = squash_range
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    probe = np.vstack([spec.planner_grid().state_actions(), rng.random((4096, q))])
    g = gram(kernel_P, probe, c_p) @ a_p
    peak = float(np.abs(g).max()) if g.size else 0.0
    shrink = min(1.0, half / peak) if peak > 0 else 1.0
    a_p = a_p * shrink

    reward_fn = RkhsFunction(kernel_R, c_r, a_r, np.zeros(1))
    transition_fn = RkhsFunction(kernel_P, c_p, a_p, np.full(m, mid))
    mdp = SyntheticMdp(spec, reward_fn, transition_fn, float(sigma_R), float(sigma_P), noise, 0.0,
                       float(target_B_R), float(target_B_P), seed)
    _, policy = oracle_value(mdp)
    return SyntheticMdp(spec, reward_fn, transition_fn, float(sigma_R), float(sigma_P), noise,
                        lipschitz_estimate(policy), float(target_B_R), float(target_B_P), seed)


def _noise(kind, scale, size, rng):
    if scale == 0:
        return np.zeros(size)
    e = rng.standard_normal(size)
    if kind == "truncated_gaussian":
        bad = np.abs(e) > 3.0
        while bad.any():
            e[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(e) > 3.0
    return scale * e


def sample_step(mdp: SyntheticMdp, z, rng: np.random.Generator):
    """One noisy transition; also reports whether the next state was clipped."""
    z = np.asarray(z, dtype=float)
    if z.shape != (mdp.spec.input_dim,):
        raise ValueError(f"state-action must have {mdp.spec.input_dim} coordinates, got shape {z.shape}")
    if np.any(z < -BOX_TOL) or np.any(z > 1 + BOX_TOL):
        raise ValueError(f"state-action {z.tolist()} lies outside the unit box")
    r = float(mdp.reward_fn(z)) + float(_noise(mdp.noise, mdp.sigma_R, 1, rng)[0])
    raw = np.atleast_1d(mdp.transition_fn(z)) + _noise(mdp.noise, mdp.sigma_P, mdp.spec.state_dim, rng)
    nxt = clip_state(raw)
    return r, nxt, bool(np.any(nxt != raw))


def step(mdp: SyntheticMdp, z, rng: np.random.Generator):
    """Return ``(reward, next_state)`` for state-action ``z``."""
    r, nxt, _ = sample_step(mdp, z, rng)
    return r, nxt


def oracle_value(mdp: SyntheticMdp, grid: PlannerGrid | None = None):
    """Optimal value tables and greedy policy of the true mean MDP."""
    grid = grid or mdp.spec.planner_grid()
    policy = value_iterate(mdp.mean_reward, mdp.mean_transition, mdp.spec.horizon, grid)
    return policy.values, policy
