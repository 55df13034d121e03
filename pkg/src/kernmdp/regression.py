"""
Regularised feature-space regression and confidence bands.

A :class:`PosteriorState` holds the ridge regression ``theta = V^{-1} Phi^T y``
with ``V = Phi^T Phi + ridge * I``.  A :class:`ConfidenceChannel` couples a
posterior with a feature map and the constants needed for the band width.

Two channel kinds exist:

``reward``
    scalar targets, one feature row per state-action pair, ridge ``H``.
``transition``
    ``m`` outputs handled through the extended input ``(z, i)``; one feature
    row per pair and output coordinate, ridge ``m H``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .features import NystromDictionary, QffMap
from .kernels import KernelSpec, kernel_diag, robust_cholesky

__all__ = [
    "PosteriorState",
    "RebuildRequired",
    "append_observations",
    "ConfidenceChannel",
    "extend_inputs",
    "nystrom_width",
    "qff_width",
]


class RebuildRequired(ValueError):
    """Feature width changed; rebuild the posterior from the raw history."""


@dataclass(frozen=True)
class PosteriorState:
    design: np.ndarray
    targets: np.ndarray
    ridge: float
    precision: np.ndarray
    chol: np.ndarray
    moment: np.ndarray
    theta: np.ndarray
    logdet_ratio: float

    @classmethod
    def empty(cls, dim: int, ridge: float):
        if not ridge > 0:
            raise ValueError("ridge must be positive")
        eye = np.eye(dim)
        return cls(
            np.zeros((0, dim)), np.zeros(0), float(ridge), ridge * eye,
            math.sqrt(ridge) * eye, np.zeros(dim), np.zeros(dim), 0.0,
        )

    @classmethod
    def from_data(cls, features, targets, ridge: float):
        features = np.asarray(features, dtype=float)
        return append_observations(cls.empty(features.shape[1], ridge), features, targets)

    @property
    def dim(self):
        return self.precision.shape[0]

    @property
    def n_obs(self):
        return self.design.shape[0]

    def solve(self, b):
        return linalg.cho_solve((self.chol, True), b)

    def whiten(self, phi):
        """``L^{-1} phi^T`` so that ``||.||^2 = phi V^{-1} phi^T`` column-wise."""
        phi = np.atleast_2d(phi)
        if self.dim == 0:
            return np.zeros((0, phi.shape[0]))
        return linalg.solve_triangular(self.chol, phi.T, lower=True)


def append_observations(state: PosteriorState, features, targets) -> PosteriorState:
    """Return a new state with the extra rows folded in."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if features.ndim == 1:
        features = features[None, :] if features.size else features.reshape(0, state.dim)
    if features.shape[0] == 0:
        return state
    if features.shape[1] != state.dim:
        raise RebuildRequired(f"feature width {features.shape[1]} != posterior dimension {state.dim}")
    if targets.shape[0] != features.shape[0]:
        raise ValueError(f"{targets.shape[0]} targets for {features.shape[0]} rows")
    if state.dim == 0:
        return replace(state, design=np.vstack([state.design, features]),
                       targets=np.concatenate([state.targets, targets]))
    precision = state.precision + features.T @ features
    precision = 0.5 * (precision + precision.T)
    chol = robust_cholesky(precision)
    moment = state.moment + features.T @ targets
    theta = linalg.cho_solve((chol, True), moment)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum()) - state.dim * math.log(state.ridge)
    return PosteriorState(
        np.vstack([state.design, features]),
        np.concatenate([state.targets, targets]),
        state.ridge, precision, chol, moment, theta, max(logdet, 0.0),
    )


def extend_inputs(z, m: int) -> np.ndarray:
    """Stack ``(z, i)`` rows for ``i = 0..m-1``, output index varying fastest."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    zz = np.repeat(z, m, axis=0)
    idx = np.tile(np.arange(m, dtype=float), n)[:, None]
    return np.hstack([zz, idx])


def nystrom_width(noise, ridge, delta, logdet_ratio, bound, eps):
    return noise / math.sqrt(ridge) * math.sqrt(2.0 * (math.log(6.0 / delta) + 0.5 * logdet_ratio)) + bound * (
        1.0 + 1.0 / math.sqrt(1.0 - eps)
    )


def qff_width(noise, ridge, delta, logdet_ratio, bound):
    return bound + noise / math.sqrt(ridge) * math.sqrt(2.0 * (math.log(3.0 / delta) + 0.5 * logdet_ratio))


@dataclass
class ConfidenceChannel:
    """Feature map + posterior + width constants for one regression target.

    ``feature_map`` is a :class:`NystromDictionary` or a :class:`QffMap`.
    For the QFF transition channel the map embeds ``z`` only and the output
    index is attached as a one-hot Kronecker factor.
    """

    kind: str
    output_dim: int
    horizon: int
    feature_map: NystromDictionary | QffMap
    kernel: KernelSpec
    noise_scale: float
    rkhs_bound: float
    epsilon: float
    delta: float
    horizon_T: int = 1
    slack_coef: float = 1.0
    posterior: PosteriorState | None = None
    width_floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("reward", "transition"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "reward" and self.output_dim != 1:
            raise ValueError("reward channel has a single output")
        if self.posterior is None:
            self.posterior = PosteriorState.empty(self.feature_dim, self.ridge)

    @property
    def mode(self):
        return "qff" if isinstance(self.feature_map, QffMap) else "nystrom"

    @property
    def ridge(self):
        return float(self.horizon * (self.output_dim if self.kind == "transition" else 1))

    @property
    def feature_dim(self):
        if self.mode == "qff":
            return self.feature_map.dim * (self.output_dim if self.kind == "transition" else 1)
        return self.feature_map.dim

    @property
    def slack(self):
        if self.mode == "qff":
            return self.slack_coef * self.rkhs_bound / max(self.horizon_T, 1)
        return 0.0

    # features ---------------------------------------------------------------

    def rows(self, z):
        """Regression inputs for state-action points ``z``.

        Reward: ``z`` itself.  Transition: extended ``(z, i)`` rows.
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.kind == "reward":
            return z
        return extend_inputs(z, self.output_dim)

    def features(self, z) -> np.ndarray:
        """Feature rows for state-action points (``m`` rows each for transitions)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.mode == "nystrom":
            return self.feature_map.embed(self.rows(z))
        phi = self.feature_map.embed(z)
        if self.kind == "reward":
            return phi
        m = self.output_dim
        n, d = phi.shape
        out = np.zeros((n * m, m * d))
        for i in range(m):
            out[i::m, i * d:(i + 1) * d] = phi
        return out

    def targets(self, rewards=None, next_states=None):
        if self.kind == "reward":
            return np.asarray(rewards, dtype=float).reshape(-1)
        return np.asarray(next_states, dtype=float).reshape(-1)

    # fitting ----------------------------------------------------------------

    def refit(self, z, y):
        """Rebuild the posterior from the raw history under the current map."""
        self.posterior = PosteriorState.from_data(self.features(z), y, self.ridge)
        return self

    def update(self, z, y):
        self.posterior = append_observations(self.posterior, self.features(z), y)
        return self

    # prediction -------------------------------------------------------------

    def predict_rows(self, phi, prior):
        """Mean and variance for feature rows ``phi`` with prior diagonal ``prior``."""
        post = self.posterior
        mean = phi @ post.theta
        w = post.whiten(phi)
        quad = (w * w).sum(0)
        if self.mode == "nystrom":
            var = prior - (phi * phi).sum(1) + self.ridge * quad
        else:
            var = self.ridge * quad
        return mean, np.maximum(var, 0.0)

    def predict(self, z):
        """Approximate posterior mean and deviation.

        Reward: arrays of shape ``(N,)``.  Transition: ``(N, m)``.
        """
        z2 = np.atleast_2d(np.asarray(z, dtype=float))
        phi = self.features(z2)
        prior = kernel_diag(self.kernel, self.rows(z2)) if self.mode == "nystrom" else None
        mean, var = self.predict_rows(phi, prior)
        sd = np.sqrt(var)
        if self.kind == "transition":
            mean = mean.reshape(-1, self.output_dim)
            sd = sd.reshape(-1, self.output_dim)
        if np.asarray(z).ndim == 1:
            return mean[0], sd[0]
        return mean, sd

    def row_variances(self, rows):
        """Approximate variance at regression inputs (used for dictionary sampling)."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if self.mode == "nystrom":
            phi = self.feature_map.embed(rows)
            prior = kernel_diag(self.kernel, rows)
            return self.predict_rows(phi, prior)[1]
        n_out = self.output_dim if self.kind == "transition" else 1
        z = rows[::n_out, : self.feature_map.input_dim]
        return self.predict_rows(self.features(z), None)[1]

    def compute_width(self) -> float:
        ld = self.posterior.logdet_ratio
        if self.mode == "nystrom":
            beta = nystrom_width(self.noise_scale, self.ridge, self.delta, ld, self.rkhs_bound, self.epsilon)
        else:
            beta = qff_width(self.noise_scale, self.ridge, self.delta, ld, self.rkhs_bound)
        return max(beta, self.width_floor)

    def membership(self, value, z, beta=None) -> np.ndarray | bool:
        """Is ``value`` (at ``z``) inside the band?  Vectorised over rows."""
        beta = self.compute_width() if beta is None else beta
        mean, sd = self.predict(z)
        value = np.asarray(value, dtype=float)
        if self.kind == "reward":
            dev = np.abs(value - mean)
            rad = beta * sd + self.slack
        else:
            dev = np.linalg.norm(np.atleast_1d(value - mean).reshape(-1, self.output_dim), axis=1)
            rad = beta * np.linalg.norm(np.atleast_2d(sd), axis=1) + self.slack
            if np.asarray(z).ndim == 1:
                dev, rad = dev[0], rad[0]
        # closed set, with a hair of room for rounding at equality
        out = dev <= rad * (1 + 1e-12) + 1e-15
        return bool(out) if np.ndim(out) == 0 else out

    def snapshot(self):
        post = self.posterior
        return {
            "kind": self.kind,
            "mode": self.mode,
            "theta": post.theta.tolist(),
            "precision_diag": np.diag(post.precision).tolist(),
            "beta": self.compute_width(),
            "dictionary_size": self.dictionary_size,
            "logdet_ratio": post.logdet_ratio,
        }

    @property
    def dictionary_size(self):
        if self.mode == "nystrom":
            return self.feature_map.size
        return self.feature_dim

    def with_map(self, feature_map):
        """Same constants, new feature map, empty posterior."""
        return replace(self, feature_map=feature_map, posterior=None)
