"""
Kernel evaluation, composite kernels and the exact GP posterior.

The exact posterior here is the reference against which the feature-space
approximations in :mod:`kernmdp.features` are checked.  All kernels are
normalised so that ``k(x, x) <= 1``.

Inputs are always row-major arrays: a single point is a 1-D vector, a batch
is an ``(N, q)`` matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

__all__ = [
    "KernelSpec",
    "GramState",
    "FactorizationError",
    "eval_kernel",
    "gram",
    "kernel_diag",
    "exact_posterior",
    "log_det_information",
    "robust_cholesky",
    "transition_kernel",
]

LEAF_FAMILIES = ("se", "matern", "linear", "index")
COMPOSITE_FAMILIES = ("additive", "product")
MATERN_NU = (0.5, 1.5, 2.5)


class FactorizationError(RuntimeError):
    """Cholesky failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    Leaves act on ``x[slice[0]:slice[1]]`` when ``slice`` is set, otherwise on
    the whole input.  Composites combine ``parts``; an additive composite is
    averaged over its parts so the diagonal stays bounded by one.
    """

    family: str
    lengthscale: float | None = None
    nu: float | None = None
    slice: tuple[int, int] | None = None
    parts: tuple["KernelSpec", ...] = field(default=())

    def __post_init__(self):
        if self.family not in LEAF_FAMILIES + COMPOSITE_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family in ("se", "matern"):
            if self.lengthscale is None or not self.lengthscale > 0:
                raise ValueError(f"{self.family} kernel needs lengthscale > 0")
        if self.family == "matern" and self.nu not in MATERN_NU:
            raise ValueError(f"Matern smoothness must be one of {MATERN_NU}, got {self.nu}")
        if self.family in COMPOSITE_FAMILIES and not self.parts:
            raise ValueError(f"{self.family} kernel needs at least one part")
        if self.slice is not None:
            a, b = self.slice
            if not 0 <= a < b:
                raise ValueError(f"bad slice {self.slice}")

    # constructors ---------------------------------------------------------

    @classmethod
    def se(cls, lengthscale, slice=None):
        return cls("se", lengthscale=float(lengthscale), slice=_slice(slice))

    @classmethod
    def matern(cls, lengthscale, nu, slice=None):
        return cls("matern", lengthscale=float(lengthscale), nu=float(nu), slice=_slice(slice))

    @classmethod
    def linear(cls, slice=None):
        return cls("linear", slice=_slice(slice))

    @classmethod
    def index(cls, slice=None):
        return cls("index", slice=_slice(slice))

    @classmethod
    def additive(cls, parts: Sequence["KernelSpec"]):
        return cls("additive", parts=tuple(parts))

    @classmethod
    def product(cls, parts: Sequence["KernelSpec"]):
        return cls("product", parts=tuple(parts))

    # introspection ----------------------------------------------------------

    @property
    def is_leaf(self):
        return self.family in LEAF_FAMILIES

    def min_input_dim(self):
        """Smallest input width compatible with all slices (0 = any)."""
        if self.is_leaf:
            return self.slice[1] if self.slice else 0
        return max(p.min_input_dim() for p in self.parts)

    def leaves(self):
        if self.is_leaf:
            return [self]
        out = []
        for p in self.parts:
            out.extend(p.leaves())
        return out

    # serialisation ----------------------------------------------------------

    def to_dict(self):
        d: dict = {"family": self.family}
        if self.lengthscale is not None:
            d["lengthscale"] = self.lengthscale
        if self.nu is not None:
            d["nu"] = self.nu
        if self.slice is not None:
            d["slices"] = list(self.slice)
        if self.parts:
            d["parts"] = [p.to_dict() for p in self.parts]
        return d

    @classmethod
    def from_dict(cls, d):
        family = d["family"]
        sl = d.get("slices", d.get("slice"))
        parts = tuple(cls.from_dict(p) for p in d.get("parts", ()))
        return cls(
            family,
            lengthscale=d.get("lengthscale"),
            nu=d.get("nu"),
            slice=_slice(sl),
            parts=parts,
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _slice(sl):
    if sl is None:
        return None
    a, b = sl
    return (int(a), int(b))


def transition_kernel(state_action_kernel: KernelSpec, input_dim: int) -> KernelSpec:
    """Product of a state-action kernel and the output-index kernel.

    The extended input is ``(z, i)`` with the index stored in column
    ``input_dim``.
    """
    base = state_action_kernel
    if base.is_leaf and base.slice is None:
        base = KernelSpec(base.family, base.lengthscale, base.nu, (0, input_dim))
    return KernelSpec.product([base, KernelSpec.index(slice=(input_dim, input_dim + 1))])


# evaluation ---------------------------------------------------------------


def _as_matrix(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a matrix of points, got shape {x.shape}")
    return x


def _sq_dists(x, y):
    d2 = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d2, 0.0)


def _leaf_gram(spec, x, y):
    if spec.slice is not None:
        a, b = spec.slice
        x, y = x[:, a:b], y[:, a:b]
    fam = spec.family
    if fam == "se":
        return np.exp(-0.5 * _sq_dists(x, y) / spec.lengthscale**2)
    if fam == "matern":
        r = np.sqrt(_sq_dists(x, y)) / spec.lengthscale
        if spec.nu == 0.5:
            return np.exp(-r)
        if spec.nu == 1.5:
            s = math.sqrt(3.0) * r
            return (1.0 + s) * np.exp(-s)
        s = math.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    if fam == "linear":
        # scaled by width so that k(x, x) <= 1 on the unit box
        return (x @ y.T) / x.shape[1]
    # index kernel: Kronecker delta on the (integer-valued) column
    return (np.rint(x[:, :1]) == np.rint(y[:, :1]).T).astype(float)


def _gram(spec, x, y):
    if spec.is_leaf:
        return _leaf_gram(spec, x, y)
    mats = [_gram(p, x, y) for p in spec.parts]
    if spec.family == "additive":
        return sum(mats) / len(mats)
    out = mats[0]
    for m in mats[1:]:
        out = out * m
    return out


def _check_dims(spec, x, y):
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"input dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    need = spec.min_input_dim()
    if x.shape[1] < need:
        raise ValueError(f"kernel slices need inputs of width >= {need}, got {x.shape[1]}")


def gram(spec: KernelSpec, x, y=None) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(x_i, y_j)``."""
    x = _as_matrix(x)
    y = x if y is None else _as_matrix(y)
    _check_dims(spec, x, y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        return np.zeros((x.shape[0], y.shape[0]))
    return _gram(spec, x, y)


def kernel_diag(spec: KernelSpec, x) -> np.ndarray:
    """``k(x_i, x_i)`` for each row, without forming the full matrix."""
    x = _as_matrix(x)
    _check_dims(spec, x, x)
    if spec.is_leaf:
        if spec.family in ("se", "matern", "index"):
            return np.ones(x.shape[0])
        xs = x[:, spec.slice[0]:spec.slice[1]] if spec.slice else x
        return (xs * xs).sum(1) / xs.shape[1]
    diags = [kernel_diag(p, x) for p in spec.parts]
    if spec.family == "additive":
        return sum(diags) / len(diags)
    out = diags[0]
    for d in diags[1:]:
        out = out * d
    return out


def eval_kernel(spec: KernelSpec, x, y) -> float:
    """Evaluate ``k(x, y)`` for two single points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("eval_kernel takes two vectors; use gram() for batches")
    return float(gram(spec, x, y)[0, 0])


# factorisation --------------------------------------------------------------


def robust_cholesky(a, jitter_start=1e-10, jitter_max=1e-6):
    """Lower Cholesky factor of ``a``, escalating diagonal jitter on failure.

    Jitter goes ``jitter_start, x10, ...`` up to ``jitter_max`` (relative to
    the mean diagonal).  Raises :class:`FactorizationError` with the
    condition number when every attempt fails.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(a))), 1e-300)
    jitter = jitter_start
    while jitter <= jitter_max * (1 + 1e-12):
        try:
            return linalg.cholesky(a + jitter * scale * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(a)
    raise FactorizationError(
        f"matrix of size {n} not positive definite after jitter {jitter_max:g} "
        f"(condition number {cond:.3e})"
    )


@dataclass(frozen=True)
class GramState:
    """Kernel matrix at a set of points, with ``chol @ chol.T = K + ridge*I``."""

    points: np.ndarray
    gram: np.ndarray
    ridge: float
    chol: np.ndarray

    @classmethod
    def build(cls, spec: KernelSpec, points, ridge: float):
        if not ridge > 0:
            raise ValueError("ridge must be positive")
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None] if pts.size else pts.reshape(0, max(spec.min_input_dim(), 1))
        k = gram(spec, pts)
        chol = robust_cholesky(k + ridge * np.eye(len(pts)))
        return cls(pts, k, float(ridge), chol)

    def __len__(self):
        return self.points.shape[0]


def exact_posterior(state: GramState, targets, query, spec: KernelSpec):
    """Exact GP posterior mean and variance with noise variance ``ridge``.

    ``query`` may be one point (scalars returned) or a batch (arrays).
    """
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if targets.shape[0] != len(state):
        raise ValueError(f"{targets.shape[0]} targets for {len(state)} points")
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = _as_matrix(q)
    prior = kernel_diag(spec, q)
    if len(state) == 0:
        mean, var = np.zeros(q.shape[0]), prior
    else:
        kq = gram(spec, state.points, q)
        w = linalg.solve_triangular(state.chol, kq, lower=True)
        alpha = linalg.cho_solve((state.chol, True), targets)
        mean = kq.T @ alpha
        var = np.clip(prior - (w * w).sum(0), 0.0, prior)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def log_det_information(state: GramState) -> float:
    """``0.5 * ln det(I + K / ridge)`` at the stored points."""
    if len(state) == 0:
        raise ValueError("log-det information needs at least one point")
    t = len(state)
    return float(np.log(np.diag(state.chol)).sum() - 0.5 * t * math.log(state.ridge))
