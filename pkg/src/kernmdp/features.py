"""
Finite-dimensional kernel embeddings.

Two schemes are provided:

* Quadrature Fourier features (``QffMap``): a deterministic embedding of the
  squared-exponential kernel built from Gauss-Hermite nodes on a tensor grid.
* Nystrom dictionaries (``NystromDictionary``): a data-dependent embedding
  onto the span of a randomly sampled subset of observed points, with
  inclusion probabilities proportional to posterior variance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .kernels import KernelSpec, gram

__all__ = [
    "hermite_roots",
    "hermite_weights",
    "QffMap",
    "build_qff",
    "qff_schedule",
    "qff_error_bound",
    "NystromDictionary",
    "nystrom_constants",
    "resample_dictionary",
    "nystrom_embed",
]

MAX_HERMITE_ORDER = 512
MAX_QFF_NODES = 10**6
PIVOT_TOL = 1e-12


def _check_order(order):
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_HERMITE_ORDER:
        raise ValueError(f"Hermite order must be an integer in [1, {MAX_HERMITE_ORDER}], got {order!r}")


def hermite_roots(order: int) -> np.ndarray:
    """Roots of the physicists' Hermite polynomial ``H_order``, ascending."""
    _check_order(order)
    roots = np.polynomial.hermite.hermgauss(int(order))[0]
    # enforce exact symmetry about zero
    return 0.5 * (roots - roots[::-1])


def hermite_weights(order: int) -> np.ndarray:
    """Normalised Gauss-Hermite weights ``2^(n-1) n! / (n^2 H_{n-1}(x_i)^2)``.

    These are the classical weights divided by ``sqrt(pi)``; they sum to one.
    """
    _check_order(order)
    w = np.polynomial.hermite.hermgauss(int(order))[1] / math.sqrt(math.pi)
    return 0.5 * (w + w[::-1])


@dataclass(frozen=True)
class QffMap:
    """Quadrature Fourier feature map for an SE kernel on a box.

    ``frequencies`` is the ``(d, q)`` tensor grid of Hermite roots and
    ``weights`` the matching products of normalised weights.  The embedding
    has ``2 d`` coordinates: cosines first, then sines.
    """

    frequencies: np.ndarray
    weights: np.ndarray
    lengthscale: float
    nodes_per_dim: int
    lower: np.ndarray
    upper: np.ndarray

    @property
    def input_dim(self):
        return self.frequencies.shape[1]

    @property
    def dim(self):
        return 2 * self.frequencies.shape[0]

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)[:, : self.input_dim]
        # shifting to the box origin is a phase change; inner products are unaffected
        arg = (math.sqrt(2.0) / self.lengthscale) * (x - self.lower) @ self.frequencies.T
        sw = np.sqrt(self.weights)
        phi = np.hstack([sw * np.cos(arg), sw * np.sin(arg)])
        return phi[0] if single else phi

    def kernel(self, x, y) -> np.ndarray:
        """Approximate kernel matrix ``phi(x) phi(y)^T``."""
        return np.atleast_2d(self.embed(x)) @ np.atleast_2d(self.embed(y)).T

    def to_dict(self):
        return {
            "kind": "qff",
            "lengthscale": self.lengthscale,
            "nodes_per_dim": self.nodes_per_dim,
            "frequencies": self.frequencies.tolist(),
            "weights": self.weights.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            frequencies=np.asarray(d["frequencies"], dtype=float),
            weights=np.asarray(d["weights"], dtype=float),
            lengthscale=float(d["lengthscale"]),
            nodes_per_dim=int(d["nodes_per_dim"]),
            lower=np.asarray(d["lower"], dtype=float),
            upper=np.asarray(d["upper"], dtype=float),
        )


def build_qff(lengthscale: float, input_dim: int, nodes_per_dim: int, lower=0.0, upper=1.0) -> QffMap:
    """Build the ``2 * nodes_per_dim**input_dim`` dimensional QFF map."""
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    if input_dim < 1 or nodes_per_dim < 1:
        raise ValueError("input_dim and nodes_per_dim must be >= 1")
    n_freq = nodes_per_dim**input_dim
    if n_freq > MAX_QFF_NODES:
        raise ValueError(
            f"QFF grid of {nodes_per_dim}^{input_dim} = {n_freq} nodes exceeds the limit of {MAX_QFF_NODES}"
        )
    roots = hermite_roots(nodes_per_dim)
    w1 = hermite_weights(nodes_per_dim)
    freqs = np.array(list(itertools.product(roots, repeat=input_dim)), dtype=float).reshape(n_freq, input_dim)
    weights = np.array([np.prod(c) for c in itertools.product(w1, repeat=input_dim)], dtype=float)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (input_dim,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (input_dim,)).copy()
    if np.any(hi <= lo):
        raise ValueError("upper must exceed lower in every dimension")
    return QffMap(freqs, weights, float(lengthscale), int(nodes_per_dim), lo, hi)


def qff_schedule(lengthscale: float, input_dim: int, horizon_T: int) -> int:
    """Nodes per dimension ``max(ceil(1/l^2), ceil(log_{4/e} T^6))``.

    ``input_dim`` does not enter the rule; it is accepted so callers can pass
    the full problem description.
    """
    if horizon_T < 2:
        raise ValueError("horizon_T must be >= 2")
    a = 1.0 / lengthscale**2
    b = 6.0 * math.log(horizon_T) / math.log(4.0 / math.e)
    # guard against 1/0.1**2 = 100.00000000000001
    return int(max(math.ceil(a - 1e-9), math.ceil(b - 1e-9), 1))


def qff_error_bound(lengthscale: float, input_dim: int, nodes_per_dim: int) -> float:
    """Uniform QFF error bound ``q 2^(q-1) (e / (4 l^2))^m / (sqrt(2) m^m)``."""
    q, m, l = input_dim, nodes_per_dim, lengthscale
    log_b = (
        math.log(q)
        + (q - 1) * math.log(2.0)
        - 0.5 * math.log(2.0)
        - m * math.log(m)
        + m * (1.0 - math.log(4.0 * l * l))
    )
    return math.exp(log_b)


# Nystrom --------------------------------------------------------------------


def nystrom_constants(eps: float, delta: float, horizon_T: int):
    """Return ``(lam, eta)`` with ``lam = (1+eps)/(1-eps)`` and
    ``eta = 6 lam ln(12 T / delta) / eps^2``."""
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ValueError("eps and delta must lie in (0, 1)")
    lam = (1.0 + eps) / (1.0 - eps)
    eta = 6.0 * lam * math.log(12.0 * horizon_T / delta) / eps**2
    return lam, eta


@dataclass(frozen=True)
class NystromDictionary:
    """Sampled anchors plus a whitening factor for their Gram matrix.

    A pivoted Cholesky of ``K_D`` picks the ``r`` anchors ``support`` that
    span ``range(K_D)`` up to a relative pivot tolerance, and ``projection``
    is ``L_S^{-1}`` (``r x r``).  The embedding ``L_S^{-1} k_S(x)`` gives the
    same inner products as ``(K_D^{1/2})^+ k_D(x)`` up to that tolerance.
    """

    spec: KernelSpec
    anchors: np.ndarray
    support: np.ndarray
    projection: np.ndarray
    probabilities: np.ndarray
    accepted: np.ndarray
    eta: float
    lam: float | None = None
    eps: float | None = None

    @property
    def size(self):
        """Number of accepted anchors (the dictionary size ``d``)."""
        return self.anchors.shape[0]

    @property
    def dim(self):
        """Embedding dimension (numerical rank of ``K_D``)."""
        return self.projection.shape[0]

    @property
    def basis(self):
        return self.anchors[self.support]

    @property
    def inclusion_log(self):
        return list(zip(range(len(self.probabilities)), self.probabilities.tolist(), self.accepted.tolist()))

    def embed(self, x) -> np.ndarray:
        return nystrom_embed(self, self.spec, x)

    def to_dict(self):
        return {
            "kind": "nystrom",
            "kernel": self.spec.to_dict(),
            "anchors": self.anchors.tolist(),
            "probabilities": self.probabilities.tolist(),
            "accepted": self.accepted.astype(int).tolist(),
            "eta": self.eta,
            "lam": self.lam,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d):
        spec = KernelSpec.from_dict(d["kernel"])
        anchors = np.asarray(d["anchors"], dtype=float)
        return cls(
            spec,
            anchors,
            *_whitening_factor(spec, anchors),
            np.asarray(d["probabilities"], dtype=float),
            np.asarray(d["accepted"], dtype=bool),
            float(d["eta"]),
            d.get("lam"),
            d.get("eps"),
        )


def _whitening_factor(spec, anchors):
    """``(support, L_S^{-1})`` from a pivoted Cholesky of the anchor Gram."""
    if anchors.shape[0] == 0:
        return np.zeros(0, dtype=int), np.zeros((0, 0))
    k = gram(spec, anchors)
    tol = PIVOT_TOL * float(k.diagonal().max())
    c, piv, rank, info = lapack.dpstrf(k, lower=1, tol=tol)
    if info < 0:
        raise ValueError(f"pivoted Cholesky failed (info={info})")
    fac = np.tril(c[:rank, :rank])
    inv = linalg.solve_triangular(fac, np.eye(rank), lower=True)
    return piv[:rank] - 1, inv


def empty_dictionary(spec: KernelSpec, input_dim: int, eta: float = 0.0, lam=None, eps=None):
    return NystromDictionary(
        spec, np.zeros((0, input_dim)), np.zeros(0, dtype=int), np.zeros((0, 0)), np.zeros(0), np.zeros(0, dtype=bool), eta, lam, eps
    )


def resample_dictionary(candidates, variances, eta: float, rng: np.random.Generator, spec: KernelSpec,
                        lam=None, eps=None) -> NystromDictionary:
    """Include each candidate independently with probability ``min(eta * var, 1)``."""
    cand = np.asarray(candidates, dtype=float)
    if cand.ndim == 1:
        cand = cand[:, None]
    var = np.asarray(variances, dtype=float).reshape(-1)
    if var.shape[0] != cand.shape[0]:
        raise ValueError(f"{var.shape[0]} variances for {cand.shape[0]} candidates")
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    p = np.minimum(eta * var, 1.0)
    # one uniform per candidate keeps the stream aligned regardless of p
    u = rng.random(cand.shape[0])
    accepted = u < p
    anchors = cand[accepted]
    return NystromDictionary(spec, anchors, *_whitening_factor(spec, anchors), p, accepted, float(eta), lam, eps)


def nystrom_embed(dictionary: NystromDictionary, spec: KernelSpec, x) -> np.ndarray:
    """Embed ``x`` as ``L_S^{-1} k_S(x)``, equivalent to ``(K_D^{1/2})^+ k_D(x)``.

    An empty dictionary maps everything to a length-0 vector, so approximate
    variances fall back to the prior ``k(x, x)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if dictionary.size == 0:
        out = np.zeros((x2.shape[0], 0))
    else:
        out = gram(spec, x2, dictionary.basis) @ dictionary.projection.T
    return out[0] if single else out

