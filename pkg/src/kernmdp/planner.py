"""
Finite-horizon value iteration on a state grid with a finite action set.

Values at off-grid states are obtained by multilinear interpolation (states
are clamped into the grid box first); executed policies look up the action of
the nearest grid node.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "PlannerGrid",
    "GridPolicy",
    "PlausibleSet",
    "PlanningError",
    "value_iterate",
    "optimistic_value_iterate",
    "evaluate_policy",
    "evaluate_uniform_policy",
]


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerGrid:
    """Tensor grid over the state box plus the finite action set."""

    state_nodes: tuple[np.ndarray, ...]
    actions: np.ndarray

    @classmethod
    def uniform(cls, state_dim: int, n_state: int, actions, low=0.0, high=1.0):
        nodes = tuple(np.linspace(low, high, n_state) for _ in range(state_dim))
        return cls(nodes, np.atleast_2d(np.asarray(actions, dtype=float)))

    @property
    def state_dim(self):
        return len(self.state_nodes)

    @property
    def shape(self):
        return tuple(len(n) for n in self.state_nodes)

    @property
    def n_nodes(self):
        return int(np.prod(self.shape))

    @property
    def n_actions(self):
        return self.actions.shape[0]

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.state_nodes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def state_actions(self) -> np.ndarray:
        """All ``(node, action)`` pairs, node-major: row ``i * A + j``."""
        s = np.repeat(self.nodes, self.n_actions, axis=0)
        a = np.tile(self.actions, (self.n_nodes, 1))
        return np.hstack([s, a])

    def clamp(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        lo = np.array([n[0] for n in self.state_nodes])
        hi = np.array([n[-1] for n in self.state_nodes])
        return np.clip(states, lo, hi)

    def _cells(self, states):
        """Lower cell index and fractional offset per dimension."""
        states = self.clamp(states)
        idx, frac = [], []
        for d, nodes in enumerate(self.state_nodes):
            x = states[:, d]
            if len(nodes) == 1:
                idx.append(np.zeros(len(x), dtype=int))
                frac.append(np.zeros(len(x)))
                continue
            i = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, len(nodes) - 2)
            f = (x - nodes[i]) / (nodes[i + 1] - nodes[i])
            idx.append(i)
            frac.append(np.clip(f, 0.0, 1.0))
        return idx, frac

    def interpolate(self, values, states) -> np.ndarray:
        """Multilinear interpolation of node ``values`` (flat, C-order) at ``states``."""
        values = np.asarray(values, dtype=float).reshape(self.shape)
        idx, frac = self._cells(states)
        out = np.zeros(len(idx[0]))
        for corner in itertools.product((0, 1), repeat=self.state_dim):
            w = np.ones(len(idx[0]))
            pos = []
            for d, c in enumerate(corner):
                n_d = len(self.state_nodes[d])
                w = w * (frac[d] if c else 1.0 - frac[d])
                pos.append(np.minimum(idx[d] + c, n_d - 1))
            out += w * values[tuple(pos)]
        return out

    def box_max(self, values, centers, radius) -> np.ndarray:
        """Max of the interpolant over ``[c - r, c + r]`` clipped to the grid box.

        The interpolant is multilinear per cell, so the maximum is attained at
        a point whose coordinates are box ends or interior grid nodes.
        """
        values = np.asarray(values, dtype=float)
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        radius = np.broadcast_to(np.asarray(radius, dtype=float), (centers.shape[0],))
        lo = self.clamp(centers - radius[:, None])
        hi = self.clamp(centers + radius[:, None])
        if self.state_dim == 1:
            nodes = self.state_nodes[0]
            best = np.maximum(self.interpolate(values, lo), self.interpolate(values, hi))
            inside = (nodes[None, :] >= lo) & (nodes[None, :] <= hi)
            masked = np.where(inside, values[None, :], -np.inf)
            return np.maximum(best, masked.max(axis=1))
        out = np.empty(centers.shape[0])
        for k in range(centers.shape[0]):
            axes = []
            for d, nodes in enumerate(self.state_nodes):
                interior = nodes[(nodes > lo[k, d]) & (nodes < hi[k, d])]
                axes.append(np.concatenate([[lo[k, d], hi[k, d]], interior]))
            pts = np.array(list(itertools.product(*axes)))
            out[k] = self.interpolate(values, pts).max()
        return out

    def nearest(self, states) -> np.ndarray:
        """Flat index of the nearest grid node for each state."""
        states = self.clamp(states)
        flat = np.zeros(states.shape[0], dtype=int)
        for d, nodes in enumerate(self.state_nodes):
            i = np.abs(states[:, d][:, None] - nodes[None, :]).argmin(axis=1)
            flat = flat * len(nodes) + i
        return flat

    def spacing(self) -> float:
        return max((float(np.max(np.diff(n))) if len(n) > 1 else 0.0) for n in self.state_nodes)

    def to_dict(self):
        return {"state_nodes": [n.tolist() for n in self.state_nodes], "actions": self.actions.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(np.asarray(n, dtype=float) for n in d["state_nodes"]), np.asarray(d["actions"], dtype=float))


@dataclass(frozen=True)
class GridPolicy:
    """Greedy action table and value tables on a :class:`PlannerGrid`.

    ``table[h, i]`` is the action index at period ``h`` (0-based) and node
    ``i``; ``values[h]`` the value table, with ``values[H] == 0``.
    """

    grid: PlannerGrid
    table: np.ndarray
    values: np.ndarray

    @property
    def horizon(self):
        return self.table.shape[0]

    def action_index(self, state, h: int) -> int:
        return int(self.table[h, self.grid.nearest(np.atleast_2d(state))[0]])

    def action(self, state, h: int) -> np.ndarray:
        return self.grid.actions[self.action_index(state, h)]

    def value(self, state, h: int = 0) -> float:
        return float(self.grid.interpolate(self.values[h], np.atleast_2d(state))[0])

    def to_dict(self):
        return {"grid": self.grid.to_dict(), "table": self.table.tolist(), "values": self.values.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(PlannerGrid.from_dict(d["grid"]), np.asarray(d["table"], dtype=int), np.asarray(d["values"], dtype=float))


@dataclass
class PlausibleSet:
    """Confidence bands for reward and transition plus the Lipschitz bound."""

    reward_channel: object
    transition_channel: object
    lipschitz_L: float
    reward_clip: float
    beta_R: float | None = None
    beta_P: float | None = None


def _check_finite(arr, z, what):
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.argwhere(bad.reshape(len(z), -1).any(axis=1))[0, 0])
        raise PlanningError(f"non-finite {what} at z = {z[row].tolist()}")


def _backward(grid, horizon, q_reward, next_states, bonus, cap_radius=None, raw_reward=None):
    """Shared backward recursion.

    ``q_reward`` is ``(N*A,)``, ``next_states`` ``(N*A, m)``, ``bonus`` the
    additive transition optimism (applied only while a future remains).
    With ``cap_radius`` the future term is also capped by the max of the
    next-period values over the transition band.

    Ties go to the lowest action index.  When ``raw_reward`` (the unclipped
    optimistic reward) is given, exact ties are first broken by the
    unclipped optimistic Q, so that saturated actions are told apart by
    their remaining uncertainty.
    """
    n, a = grid.n_nodes, grid.n_actions
    values = np.zeros((horizon + 1, n))
    table = np.zeros((horizon, n), dtype=int)
    rows = np.arange(n)
    for h in range(horizon - 1, -1, -1):
        future = np.zeros(n * a)
        raw_future = future
        if h < horizon - 1:
            future = grid.interpolate(values[h + 1], next_states)
            if bonus is not None:
                future = future + bonus
                raw_future = future
                if cap_radius is not None:
                    future = np.minimum(future, grid.box_max(values[h + 1], next_states, cap_radius))
        q = (q_reward + future).reshape(n, a)
        if raw_reward is None:
            # argmax keeps the first maximiser
            table[h] = np.argmax(q, axis=1)
        else:
            raw = (raw_reward + raw_future).reshape(n, a)
            tied = q == q.max(axis=1, keepdims=True)
            table[h] = np.argmax(np.where(tied, raw, -np.inf), axis=1)
        values[h] = q[rows, table[h]]
    return GridPolicy(grid, table, values)


def value_iterate(reward: Callable, transition: Callable, horizon: int, grid: PlannerGrid) -> GridPolicy:
    """Optimal grid policy for the MDP with mean functions ``reward``/``transition``.

    Both callables take an ``(K, m+n)`` array of state-action rows.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    z = grid.state_actions()
    r = np.asarray(reward(z), dtype=float).reshape(-1)
    p = np.asarray(transition(z), dtype=float).reshape(len(z), -1)
    _check_finite(r, z, "reward")
    _check_finite(p, z, "transition")
    return _backward(grid, horizon, r, p, None)


def optimistic_value_iterate(plausible: PlausibleSet, horizon: int, grid: PlannerGrid, cap_bonus: bool = False) -> GridPolicy:
    """Value iteration with per-pair optimism bonuses.

    ``Q_h(s, a) = min(mu_R + beta_R sd_R + slack_R, B_R)
    + interp(V_{h+1}, mu_P) + L (beta_P ||sd_P|| + slack_P)``, the last two
    terms only while ``h < H``.  With ``cap_bonus`` the transition term is
    additionally capped by the largest next-period value inside the band,
    which is still an upper bound on the value of any plausible model.

    Any maximiser is a valid optimistic choice; exact ties (typically
    several actions saturated at the clip) are broken by the unclipped
    optimistic Q and then by the lowest action index.
    """
    ch_r, ch_p = plausible.reward_channel, plausible.transition_channel
    beta_r = ch_r.compute_width() if plausible.beta_R is None else plausible.beta_R
    beta_p = ch_p.compute_width() if plausible.beta_P is None else plausible.beta_P
    z = grid.state_actions()
    mu_r, sd_r = ch_r.predict(z)
    mu_p, sd_p = ch_p.predict(z)
    raw_r = mu_r + beta_r * sd_r + ch_r.slack
    q_r = np.minimum(raw_r, plausible.reward_clip)
    radius = beta_p * np.linalg.norm(sd_p, axis=1) + ch_p.slack
    bonus = plausible.lipschitz_L * radius
    _check_finite(q_r, z, "optimistic reward")
    _check_finite(mu_p, z, "transition mean")
    return _backward(grid, horizon, q_r, mu_p, bonus, radius if cap_bonus else None, raw_r)


def evaluate_policy(reward: Callable, transition: Callable, policy: GridPolicy, grid: PlannerGrid | None = None) -> np.ndarray:
    """Value tables ``(H+1, N)`` of a fixed policy under mean-state backups.

    ``grid`` is the evaluation grid (defaults to the policy's); actions at its
    nodes come from the policy's nearest-node lookup.
    """
    grid = grid or policy.grid
    nodes = grid.nodes
    horizon = policy.horizon
    values = np.zeros((horizon + 1, grid.n_nodes))
    same = grid is policy.grid
    node_map = np.arange(grid.n_nodes) if same else policy.grid.nearest(nodes)
    for h in range(horizon - 1, -1, -1):
        acts = policy.grid.actions[policy.table[h, node_map]]
        z = np.hstack([nodes, acts])
        r = np.asarray(reward(z), dtype=float).reshape(-1)
        nxt = np.asarray(transition(z), dtype=float).reshape(len(z), -1)
        values[h] = r + (grid.interpolate(values[h + 1], nxt) if h < horizon - 1 else 0.0)
    return values


def evaluate_uniform_policy(reward: Callable, transition: Callable, horizon: int, grid: PlannerGrid) -> np.ndarray:
    """Value tables of the policy that picks a uniformly random grid action."""
    z = grid.state_actions()
    r = np.asarray(reward(z), dtype=float).reshape(-1)
    p = np.asarray(transition(z), dtype=float).reshape(len(z), -1)
    n, a = grid.n_nodes, grid.n_actions
    values = np.zeros((horizon + 1, n))
    for h in range(horizon - 1, -1, -1):
        future = grid.interpolate(values[h + 1], p) if h < horizon - 1 else 0.0
        values[h] = (r + future).reshape(n, a).mean(axis=1)
    return values
