import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kernmdp.features import build_qff, empty_dictionary, resample_dictionary
from kernmdp.kernels import GramState, KernelSpec, exact_posterior, transition_kernel
from kernmdp.regression import (
    ConfidenceChannel,
    PosteriorState,
    RebuildRequired,
    append_observations,
    extend_inputs,
    nystrom_width,
    qff_width,
)

K = KernelSpec.se(0.25)
COMMON = dict(horizon=5, noise_scale=0.1, rkhs_bound=2.0, epsilon=0.5, delta=0.1)


def nystrom_channel(kind="reward", m=1, kernel=K, q=2, **kw):
    kern = kernel if kind == "reward" else transition_kernel(kernel, q)
    width = q if kind == "reward" else q + 1
    return ConfidenceChannel(kind, m, feature_map=empty_dictionary(kern, width), kernel=kern, **{**COMMON, **kw})


def full_dictionary(ch, z, rng):
    rows = ch.rows(z)
    ch.feature_map = resample_dictionary(rows, np.ones(len(rows)), 1.0, rng, ch.kernel)
    return ch


# posterior state ------------------------------------------------------------


def test_append_zero_rows_is_identity():
    s = PosteriorState.empty(3, 5.0)
    assert append_observations(s, np.zeros((0, 3)), []) is s


def test_single_observation_solution():
    H, y = 5.0, 2.3
    s = append_observations(PosteriorState.empty(1, H), [[1.0]], [y])
    assert s.theta[0] == pytest.approx(y / (1 + H))


def test_symmetric_targets_cancel():
    s = append_observations(PosteriorState.empty(1, 5.0), [[1.0], [1.0]], [1.5, -1.5])
    assert s.theta[0] == pytest.approx(0.0, abs=1e-15)


def test_dimension_change_requires_rebuild():
    with pytest.raises(RebuildRequired):
        append_observations(PosteriorState.empty(2, 1.0), np.ones((1, 3)), [0.0])


@given(st.integers(1, 6), st.integers(1, 25), st.integers(0, 10_000))
def test_posterior_invariants(dim, n, seed):
    rng = np.random.default_rng(seed)
    ridge = 3.0
    phi = rng.standard_normal((n, dim))
    y = rng.standard_normal(n)
    s = PosteriorState.empty(dim, ridge)
    prev = 0.0
    gains = 0.0
    for i in range(n):
        # determinant lemma: each row adds ln(1 + phi V^{-1} phi^T)
        w = s.whiten(phi[i:i + 1])
        gains += math.log1p(float((w * w).sum()))
        s = append_observations(s, phi[i:i + 1], y[i:i + 1])
        assert s.logdet_ratio >= prev - 1e-10
        prev = s.logdet_ratio
    assert s.logdet_ratio == pytest.approx(gains, abs=1e-6)
    assert np.allclose(s.precision, s.precision.T)
    assert np.linalg.eigvalsh(s.precision).min() >= ridge - 1e-8
    resid = np.linalg.norm(s.precision @ s.theta - s.moment)
    assert resid <= 1e-8 * max(1.0, np.linalg.norm(s.moment))
    batch = PosteriorState.from_data(phi, y, ridge)
    np.testing.assert_allclose(batch.theta, s.theta, atol=1e-9)


# widths ---------------------------------------------------------------------


def test_nystrom_width_closed_form():
    assert nystrom_width(1.0, 1.0, 6 * math.exp(-2), 0.0, 1.0, 0.0) == pytest.approx(4.0)


def test_nystrom_width_diverges_as_eps_to_one():
    widths = [nystrom_width(0.1, 5, 0.1, 0.0, 1.0, e) for e in (0.9, 0.99, 0.9999)]
    assert widths[0] < widths[1] < widths[2] and widths[2] > 100


def test_qff_width_closed_form():
    assert qff_width(1.0, 1.0, 3 * math.exp(-2), 0.0, 1.0) == pytest.approx(3.0)


def test_width_uses_channel_constants(rng):
    ch = nystrom_channel()
    z = rng.random((20, 2))
    full_dictionary(ch, z, rng).refit(z, np.sin(z[:, 0]))
    ld = ch.posterior.logdet_ratio
    ref = 0.1 / math.sqrt(5) * math.sqrt(2 * (math.log(6 / 0.1) + 0.5 * ld)) + 2.0 * (1 + 1 / math.sqrt(0.5))
    assert ch.compute_width() == pytest.approx(ref)
    ch.width_floor = ref + 1
    assert ch.compute_width() == ref + 1


# prediction -------------------------------------------------------------------


def test_prior_prediction_nystrom():
    mean, sd = nystrom_channel().predict([0.3, 0.6])
    assert (mean, sd) == (0.0, 1.0)


def test_prior_prediction_qff():
    ch = ConfidenceChannel("reward", 1, feature_map=build_qff(0.25, 2, 10), kernel=K, **COMMON)
    _, sd = ch.predict(np.random.default_rng(0).random((30, 2)))
    np.testing.assert_allclose(sd**2, 1.0, atol=1e-6)


def test_full_dictionary_matches_exact_posterior(rng):
    z = rng.random((80, 2))
    y = np.cos(4 * z[:, 1]) + 0.1 * rng.standard_normal(80)
    ch = full_dictionary(nystrom_channel(), z, rng).refit(z, y)
    q = rng.random((100, 2))
    mean, sd = ch.predict(q)
    m0, v0 = exact_posterior(GramState.build(K, z, 5.0), y, q, K)
    assert np.abs(mean - m0).max() < 1e-8
    assert np.abs(sd**2 - v0).max() < 1e-8


def test_transition_channel_decouples_outputs(rng):
    m, n = 2, 40
    z = rng.random((n, 2))
    s_next = np.stack([np.sin(3 * z[:, 0]), np.cos(2 * z[:, 1])], axis=1) + 0.05 * rng.standard_normal((n, m))
    ch = nystrom_channel("transition", m=m)
    full_dictionary(ch, z, rng).refit(z, ch.targets(next_states=s_next))
    q = rng.random((30, 2))
    mean, sd = ch.predict(q)
    assert mean.shape == (30, m)
    for i in range(m):
        m0, v0 = exact_posterior(GramState.build(K, z, m * 5.0), s_next[:, i], q, K)
        np.testing.assert_allclose(mean[:, i], m0, atol=1e-8)
        np.testing.assert_allclose(sd[:, i] ** 2, v0, atol=1e-8)


def test_qff_transition_channel_is_kronecker(rng):
    fmap = build_qff(0.25, 2, 8)
    ch = ConfidenceChannel("transition", 2, feature_map=fmap, kernel=transition_kernel(K, 2), **COMMON)
    z = rng.random((3, 2))
    phi = ch.features(z)
    assert phi.shape == (6, 2 * fmap.dim)
    np.testing.assert_array_equal(phi[1, : fmap.dim], 0.0)
    np.testing.assert_allclose(phi[1, fmap.dim:], fmap.embed(z[0]))


def test_extend_inputs_order():
    out = extend_inputs([[0.1, 0.2], [0.3, 0.4]], 2)
    np.testing.assert_array_equal(out[:, 2], [0, 1, 0, 1])
    np.testing.assert_array_equal(out[1, :2], [0.1, 0.2])


# membership -------------------------------------------------------------------


def fitted_channel(rng, kind="reward", m=1):
    z = rng.random((25, 2))
    ch = nystrom_channel(kind, m=m)
    full_dictionary(ch, z, rng)
    y = rng.standard_normal(25 * m)
    return ch.refit(z, y)


def test_membership_centre_and_outside(rng):
    ch = fitted_channel(rng)
    z = np.array([0.5, 0.5])
    mean, sd = ch.predict(z)
    beta = ch.compute_width()
    assert ch.membership(mean, z)
    assert not ch.membership(mean + 2 * beta * sd, z)


def test_membership_vector_boundary_is_closed(rng):
    m = 3
    ch = fitted_channel(rng, "transition", m)
    z = np.array([0.2, 0.8])
    mean, sd = ch.predict(z)
    beta = 1.7
    radius = beta * np.linalg.norm(sd)
    direction = np.ones(m) / math.sqrt(m)
    assert ch.membership(mean + radius * direction, z, beta)
    assert not ch.membership(mean + 1.001 * radius * direction, z, beta)


def test_qff_membership_includes_slack(rng):
    ch = ConfidenceChannel("reward", 1, feature_map=build_qff(0.25, 2, 6), kernel=K, horizon_T=100,
                           slack_coef=1.0, **COMMON)
    assert ch.slack == pytest.approx(2.0 / 100)
    z = np.array([0.1, 0.1])
    mean, sd = ch.predict(z)
    assert ch.membership(mean + 0.02, z, 0.0)
    assert not ch.membership(mean + 0.021, z, 0.0)
