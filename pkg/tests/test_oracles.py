"""The oracles must stand on their own two feet before anything is checked
against them, so these tests pin them to closed-form answers only."""

import math

import numpy as np
import pytest

from zmix.bench import make_running_example
from zmix.core import RngStream, UnnormalizedTarget, adapt_tractable_as_joint
from zmix.oracles import (
    EnvelopeViolationError,
    InstanceTooLargeError,
    QuadratureError,
    QuadratureSpec,
    SingularMatrixError,
    dense_inverse,
    enumerate_label_expectation,
    nested_simpson_ascending,
    quadrature_integral,
    quadrature_tau,
    quadrature_z,
    rejection_sample_extended,
    replicate,
)

_LOG_2PI = math.log(2.0 * math.pi)


def _scaled_normal(scale: float) -> UnnormalizedTarget:
    def log_density(xs):
        x = xs[:, 0]
        return math.log(scale) - 0.5 * x * x - 0.5 * _LOG_2PI
    return UnnormalizedTarget(dim=1, log_unnorm_density=log_density)


class TestQuadrature:
    def test_normal_mass(self):
        assert quadrature_z(_scaled_normal(1.0)) == pytest.approx(1.0, abs=1e-12)

    def test_scale_passes_through(self):
        assert quadrature_z(_scaled_normal(2.0)) == pytest.approx(2.0, abs=1e-11)

    def test_known_gaussian_moment(self):
        """integral of x^2 exp(-x^2/2)/sqrt(2 pi) = 1, via the log integrand."""
        def log_fn(xs):
            x = xs[:, 0]
            with np.errstate(divide="ignore"):
                return 2.0 * np.log(np.abs(x)) - 0.5 * x * x - 0.5 * _LOG_2PI
        assert quadrature_integral(log_fn) == pytest.approx(1.0, abs=1e-10)

    def test_error_estimate_trips_on_rough_grid(self):
        spec = QuadratureSpec(lower=-12.0, upper=12.0, points=9)
        def log_fn(xs):
            x = xs[:, 0]
            return -0.5 * x * x * 100.0  # far too sharp for nine points
        with pytest.raises(QuadratureError):
            quadrature_integral(log_fn, spec)

    def test_dimension_guard(self):
        tgt = UnnormalizedTarget(dim=2, log_unnorm_density=lambda xs: -np.sum(xs**2, axis=1))
        with pytest.raises(ValueError):
            quadrature_z(tgt)


class TestQuadratureTau:
    def test_matched_proposal_gives_unit_tau(self):
        """If the per-label joint equals the normalized target, every
        second moment collapses to exactly 1."""
        target = _scaled_normal(1.0)

        def log_joint_at_label(xs, i):
            return target.log_density(xs)

        taus = quadrature_tau(target, log_joint_at_label, 3)
        np.testing.assert_allclose(taus, 1.0, atol=1e-10)

    def test_gaussian_grid_closed_form(self):
        """Target N(0,1) against the K=3 grid with uniform labels: each joint
        slice is q(x, i) = N(mu_i, 2)/3, and the Gaussian integral gives
        tau_i = 3 * sqrt(4/3) * exp(mu_i^2 / 3) = 2*sqrt(3) * exp(mu_i^2 / 3)."""
        target = _scaled_normal(1.0)
        _, family = make_running_example(3, 0.5, 2.0)
        joint = adapt_tractable_as_joint(family)

        def log_joint_at_label(xs, i):
            return joint.log_joint_density(xs, np.full(xs.shape[0], i))

        taus = quadrature_tau(target, log_joint_at_label, 3)
        mus = np.array([-5.0, 0.0, 5.0])
        expected = 2.0 * math.sqrt(3.0) * np.exp(mus**2 / 3.0)
        np.testing.assert_allclose(taus, expected, rtol=1e-8)
        assert taus[1] == pytest.approx(2.0 * math.sqrt(3.0), rel=1e-10)

    def test_explicit_label_subset(self):
        target = _scaled_normal(1.0)

        def log_joint_at_label(xs, i):
            return target.log_density(xs)

        taus = quadrature_tau(target, log_joint_at_label, [2, 5])
        assert taus.shape == (2,)
        np.testing.assert_allclose(taus, 1.0, atol=1e-10)


class TestNestedSimpson:
    def test_triangle_area(self):
        """Constant 1 over the wedge 0 < x1 < x2 < 1 integrates to 1/2."""
        val = nested_simpson_ascending(lambda x1, x2: np.ones_like(x1), 0.0, 1.0)
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_product_gaussian_on_wedge(self):
        """Two iid standard normals land in ascending order half the time."""
        def fn(x1, x2):
            return np.exp(-0.5 * (x1 * x1 + x2 * x2)) / (2.0 * math.pi)
        val = nested_simpson_ascending(fn, -9.0, 9.0, points=801)
        assert val == pytest.approx(0.5, abs=1e-8)

    def test_polynomial(self):
        # integral over 0<x1<x2<1 of x1*x2 = 1/8
        val = nested_simpson_ascending(lambda x1, x2: x1 * x2, 0.0, 1.0)
        assert val == pytest.approx(1.0 / 8.0, abs=1e-12)


class TestEnumeration:
    def test_constant_function(self):
        alpha = np.array([0.2, 0.3, 0.5])
        assert enumerate_label_expectation(lambda labels: 1.0, alpha, 4) == pytest.approx(1.0)

    def test_all_first_label_probability(self):
        alpha = np.array([0.2, 0.8])
        got = enumerate_label_expectation(
            lambda labels: float(np.all(labels == 1)), alpha, 5
        )
        assert got == pytest.approx(0.2**5, rel=1e-12)

    def test_product_of_counts(self):
        """E[N_1 N_2] = N(N-1) a_1 a_2 for iid labels (cross term only)."""
        alpha = np.array([0.3, 0.7])
        n = 6
        def f(labels):
            return float(np.sum(labels == 1) * np.sum(labels == 2))
        got = enumerate_label_expectation(f, alpha, n)
        assert got == pytest.approx(n * (n - 1) * 0.3 * 0.7, rel=1e-12)

    def test_size_guard(self):
        with pytest.raises(InstanceTooLargeError):
            enumerate_label_expectation(lambda labels: 1.0, np.full(10, 0.1), 8)

    def test_alpha_must_normalize(self):
        with pytest.raises(ValueError):
            enumerate_label_expectation(lambda labels: 1.0, np.array([0.5, 0.6]), 2)


class TestDenseInverse:
    def test_identity(self):
        np.testing.assert_allclose(dense_inverse(np.eye(4)), np.eye(4), atol=1e-14)

    def test_hand_worked_two_by_two(self):
        a = np.array([[2.0, -1.0], [-1.0, 2.0]])
        expected = np.array([[2.0, 1.0], [1.0, 2.0]]) / 3.0
        np.testing.assert_allclose(dense_inverse(a), expected, atol=1e-14)

    def test_random_matrices_against_residual(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            k = int(rng.integers(1, 9))
            a = rng.normal(size=(k, k)) + k * np.eye(k)
            inv = dense_inverse(a)
            np.testing.assert_allclose(a @ inv, np.eye(k), atol=1e-9)

    def test_singular_raises(self):
        with pytest.raises(SingularMatrixError):
            dense_inverse(np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_size_guard(self):
        with pytest.raises(InstanceTooLargeError):
            dense_inverse(np.eye(17))


class TestReplicate:
    def test_constant_function(self):
        summary = replicate(lambda s: 3.5, 16, RngStream(seed=1))
        assert summary.mean == pytest.approx(3.5)
        assert summary.variance == pytest.approx(0.0, abs=1e-30)
        assert summary.count == 16

    def test_bernoulli_moments(self):
        """Bernoulli(0.25) replicate values: mean and variance land within a
        few bootstrap errors of p and p(1-p)."""
        def fn(stream):
            return float(stream.generator().uniform() < 0.25)
        summary = replicate(fn, 4000, RngStream(seed=2))
        assert abs(summary.mean - 0.25) < 4.0 * summary.se_mean
        assert abs(summary.variance - 0.1875) < 4.0 * summary.se_variance

    def test_bit_identical_rerun(self):
        def fn(stream):
            return stream.generator().normal()
        s1 = replicate(fn, 64, RngStream(seed=9))
        s2 = replicate(fn, 64, RngStream(seed=9))
        np.testing.assert_array_equal(s1.values, s2.values)
        assert s1.se_mean == s2.se_mean

    def test_vector_values_get_covariance(self):
        def fn(stream):
            g = stream.generator()
            a = g.normal()
            return np.array([a, a + 0.01 * g.normal()])
        summary = replicate(fn, 800, RngStream(seed=4))
        assert summary.covariance.shape == (2, 2)
        # near-duplicated coordinates: correlation must be essentially 1
        corr = summary.covariance[0, 1] / math.sqrt(
            summary.covariance[0, 0] * summary.covariance[1, 1]
        )
        assert corr > 0.99


class TestRejectionOracle:
    def test_gamma_zero_slot_is_uniform_and_labels_follow_pmf(self):
        """At the cold end the potential is flat (pure-geometric), so the
        draw is just the raw product law."""
        _, family = make_running_example(2, 0.5, 2.0)
        target, _ = make_running_example(2, 0.5, 2.0)
        draws = rejection_sample_extended(
            family, target, "purely_geometric", 0.0, 2, 4000, RngStream(seed=5)
        )
        assert draws.acceptance_rate > 0.9  # envelope margin only
        p_slot1 = np.mean(draws.slots == 1)
        assert abs(p_slot1 - 0.5) < 4.0 * math.sqrt(0.25 / 4000)
        p_lab1 = np.mean(draws.labels == 1)
        assert abs(p_lab1 - 0.5) < 4.0 * math.sqrt(0.25 / 8000)

    def test_instance_guard(self):
        target, family = make_running_example(3, 0.5, 2.0)
        with pytest.raises(InstanceTooLargeError):
            rejection_sample_extended(
                family, target, "purely_geometric", 1.0, 2, 10, RngStream(seed=6)
            )

    def test_warm_end_selected_point_tracks_target(self):
        """At gamma = 1 the selected coordinate follows pi weighted by the
        occupancy denominator; with K = 1 that is exactly importance-free,
        so its mean must match the standard normal."""
        target, family = make_running_example(1, 0.5, 2.0)
        draws = rejection_sample_extended(
            family, target, "semi_geometric", 1.0, 1, 6000, RngStream(seed=7)
        )
        sel = draws.xs[np.arange(draws.xs.shape[0]), draws.slots - 1]
        assert abs(sel.mean()) < 4.0 * sel.std(ddof=1) / math.sqrt(sel.size)
        assert abs(sel.std(ddof=1) - 1.0) < 0.05

    def test_envelope_margin_is_respected(self):
        target, family = make_running_example(2, 0.5, 2.0)
        draws = rejection_sample_extended(
            family, target, "semi_geometric", 0.7, 2, 500, RngStream(seed=8)
        )
        assert draws.envelope > 0.0
        assert 0.0 < draws.acceptance_rate <= 1.0
