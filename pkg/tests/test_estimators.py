"""One-shot estimators: hand-worked values, exact identities, cost accounting."""

import math

import numpy as np
import pytest

from zmix.bench import GaussianGridFamily, make_running_example
from zmix.core import (
    AbsoluteContinuityError,
    LabeledSample,
    RngStream,
    UnnormalizedTarget,
    as_point_batch,
    counts_from_labels,
    draw_labeled_sample,
    k_eff,
)
from zmix.estimators import (
    EstimateReport,
    WeightFunctionSet,
    bh_weights,
    grouped_samples,
    report_from_log_terms,
    z_bh,
    z_mis,
    z_rb,
)


def _target_from_component(family, label):
    """Normalized target equal to one proposal component (true constant 1)."""
    return UnnormalizedTarget(
        dim=family.dim,
        log_unnorm_density=lambda xs: family.log_component_density(label, xs),
    )


class TestEstimateReport:
    def test_log_value_is_authoritative(self):
        rep = report_from_log_terms(np.array([0.0, 0.0]), -math.log(2.0), 1, 4)
        assert rep.z_hat == pytest.approx(1.0, rel=1e-15)
        assert rep.log_z_hat == pytest.approx(0.0, abs=1e-15)

    def test_overflow_flags_diagnostic(self):
        rep = report_from_log_terms(np.array([800.0]), 0.0, 1, 1)
        assert rep.z_hat == math.inf
        assert rep.log_z_hat == pytest.approx(800.0)
        assert rep.diagnostics["linear_overflow"] == 1.0

    def test_all_dead_terms_give_zero(self):
        rep = report_from_log_terms(np.array([-np.inf, -np.inf]), 0.0, 1, 2)
        assert rep.z_hat == 0.0
        assert np.isneginf(rep.log_z_hat)

    def test_validation(self):
        with pytest.raises(ValueError):
            EstimateReport(z_hat=1.0, log_z_hat=math.nan, k_eff=1, cost_units=1)
        with pytest.raises(ValueError):
            EstimateReport(z_hat=1.0, log_z_hat=math.inf, k_eff=1, cost_units=1)
        with pytest.raises(ValueError):
            EstimateReport(z_hat=-0.5, log_z_hat=0.0, k_eff=1, cost_units=1)


class TestBhWeights:
    def test_single_component_weight_is_one(self):
        _, family = make_running_example(1, 0.5, 2.0)
        counts = counts_from_labels(np.array([1, 1, 1]))
        w = bh_weights(counts, family)
        xs = np.linspace(-4, 4, 9)
        np.testing.assert_allclose(w.omega(1, xs), 1.0, rtol=1e-15)

    def test_symmetric_point_splits_evenly(self):
        """Equal counts and a point equidistant from both means: 1/2 each."""
        fam = GaussianGridFamily(K=2, m=0.5, s=2.0, mu_min=-1.0, mu_max=1.0)
        counts = counts_from_labels(np.array([1, 2, 1, 2]))
        w = bh_weights(counts, fam)
        assert w.omega(1, np.array([0.0]))[0] == pytest.approx(0.5, rel=1e-14)
        assert w.omega(2, np.array([0.0]))[0] == pytest.approx(0.5, rel=1e-14)

    def test_counts_tilt_the_split(self):
        """Three draws of label 1 against one of label 2 at the symmetric
        point: weights 3/4 and 1/4."""
        fam = GaussianGridFamily(K=2, m=0.5, s=2.0, mu_min=-1.0, mu_max=1.0)
        counts = counts_from_labels(np.array([1, 1, 1, 2]))
        w = bh_weights(counts, fam)
        assert w.omega(1, np.array([0.0]))[0] == pytest.approx(0.75, rel=1e-14)
        assert w.omega(2, np.array([0.0]))[0] == pytest.approx(0.25, rel=1e-14)

    def test_partition_of_unity(self):
        rng = np.random.default_rng(2)
        _, family = make_running_example(6, 0.4, 3.0)
        labels = rng.integers(1, 7, size=40)
        counts = counts_from_labels(labels)
        w = bh_weights(counts, family)
        xs = rng.normal(scale=4.0, size=100)
        total = np.zeros(100)
        for lab in range(1, 7):
            total += w.omega(lab, xs)
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_unoccupied_label_gets_zero(self):
        _, family = make_running_example(3, 0.5, 2.0)
        counts = counts_from_labels(np.array([1, 1]))
        w = bh_weights(counts, family)
        assert np.all(np.isneginf(w.log_omega(2, np.array([0.0, 1.0]))))

    def test_empty_counts_rejected(self):
        _, family = make_running_example(3, 0.5, 2.0)
        with pytest.raises(ValueError):
            bh_weights(counts_from_labels(np.array([], dtype=int)), family)


class TestGroupedSamples:
    def test_blocks_preserve_position_order(self):
        xs = np.arange(6.0)[:, None]
        labels = np.array([2, 1, 2, 3, 1, 2])
        blocks = grouped_samples(LabeledSample(xs=xs, labels=labels))
        np.testing.assert_array_equal(blocks[1][:, 0], [1.0, 4.0])
        np.testing.assert_array_equal(blocks[2][:, 0], [0.0, 2.0, 5.0])
        np.testing.assert_array_equal(blocks[3][:, 0], [3.0])


class TestZMis:
    def test_single_component_is_plain_importance_sampling(self):
        target, family = make_running_example(1, 0.5, 2.0)
        rng = np.random.default_rng(3)
        xs = family.sample_component(1, rng, 50)
        w = WeightFunctionSet(K=1, log_omega=lambda label, pts: np.zeros(len(pts)))
        rep = z_mis({1: xs}, w, target, family)
        ratios = np.exp(target.log_density(xs) - family.log_component_density(1, xs))
        assert rep.z_hat == pytest.approx(ratios.mean(), rel=1e-13)

    def test_zero_variance_when_proposal_equals_target(self):
        _, family = make_running_example(1, 0.5, 2.0)
        target = _target_from_component(family, 1)
        rng = np.random.default_rng(4)
        xs = family.sample_component(1, rng, 37)
        w = WeightFunctionSet(K=1, log_omega=lambda label, pts: np.zeros(len(pts)))
        rep = z_mis({1: xs}, w, target, family)
        assert rep.z_hat == pytest.approx(1.0, rel=1e-14)

    def test_cost_and_keff_accounting(self):
        target, family = make_running_example(3, 0.5, 2.0)
        rng = np.random.default_rng(5)
        sample = draw_labeled_sample(family, 30, rng)
        blocks = grouped_samples(sample)
        counts = counts_from_labels(sample.labels)
        rep = z_mis(blocks, bh_weights(counts, family), target, family)
        assert rep.k_eff == k_eff(counts)
        assert rep.cost_units == 30 * (rep.k_eff + 1)

    def test_dead_target_point_contributes_zero(self):
        _, family = make_running_example(1, 0.5, 2.0)
        target = UnnormalizedTarget(
            dim=1,
            log_unnorm_density=lambda xs: np.where(
                xs[:, 0] > 0, family.log_component_density(1, xs), -np.inf
            ),
        )
        w = WeightFunctionSet(K=1, log_omega=lambda label, pts: np.zeros(len(pts)))
        xs = np.array([-1.0, 1.0, 2.0])
        rep = z_mis({1: xs}, w, target, family)
        # two live unit ratios averaged over three draws
        assert rep.z_hat == pytest.approx(2.0 / 3.0, rel=1e-14)

    def test_vanishing_component_density_under_mass_raises(self):
        fam = GaussianGridFamily(K=2, m=0.5, s=2.0, mu_min=-1.0, mu_max=1.0)

        class Clipped(GaussianGridFamily):
            def log_component_density(self, label, xs):
                vals = super().log_component_density(label, xs)
                if label == 2:
                    pts = as_point_batch(xs, 1)[:, 0]
                    vals = np.where(pts < 0.0, -np.inf, vals)
                return vals

        clipped = Clipped(K=2, m=0.5, s=2.0, mu_min=-1.0, mu_max=1.0)
        target = _target_from_component(fam, 1)
        w = WeightFunctionSet(K=2, log_omega=lambda label, pts: np.full(len(pts), -math.log(2.0)))
        with pytest.raises(AbsoluteContinuityError):
            z_mis({2: np.array([-1.0])}, w, target, clipped)

    def test_empty_inputs_rejected(self):
        target, family = make_running_example(1, 0.5, 2.0)
        w = WeightFunctionSet(K=1, log_omega=lambda label, pts: np.zeros(len(pts)))
        with pytest.raises(ValueError):
            z_mis({}, w, target, family)
        with pytest.raises(ValueError):
            z_mis({1: np.empty((0, 1))}, w, target, family)


class TestZBh:
    def test_single_draw_hand_value(self):
        target, family = make_running_example(3, 0.5, 2.0)
        sample = LabeledSample(xs=np.array([[0.7]]), labels=np.array([2]))
        rep = z_bh(sample, target, family)
        expected = math.exp(
            target.log_density(sample.xs)[0]
            - family.log_component_density(2, sample.xs)[0]
        )
        assert rep.z_hat == pytest.approx(expected, rel=1e-14)
        assert rep.k_eff == 1 and rep.cost_units == 1

    def test_matches_weighted_form_exactly(self):
        """The grouped one-pass computation and the generic weighted form are
        the same estimator, down to floating-point roundoff."""
        target, family = make_running_example(5, 0.3, 4.0)
        for seed in range(5):
            sample = draw_labeled_sample(
                family, 60, RngStream(seed=seed, address=(0,)).generator()
            )
            counts = counts_from_labels(sample.labels)
            direct = z_bh(sample, target, family)
            weighted = z_mis(
                grouped_samples(sample), bh_weights(counts, family), target, family
            )
            assert direct.z_hat == pytest.approx(weighted.z_hat, rel=1e-12)

    def test_cost_scales_with_occupied_labels_only(self):
        target, family = make_running_example(200, 0.5, 2.0)
        sample = draw_labeled_sample(family, 25, np.random.default_rng(6))
        rep = z_bh(sample, target, family)
        assert rep.cost_units == 25 * rep.k_eff
        assert rep.k_eff <= min(200, 25)
        rb = z_rb(sample, target, family)
        assert rb.cost_units == 25 * 200
        assert rep.cost_units < rb.cost_units

    def test_proportional_counts_collapse_to_mixture_form(self):
        """When the realized counts are exactly N alpha_l (uniform labels
        here), the count-weighted denominator is N qbar, so the two
        estimators coincide identically."""
        target, family = make_running_example(3, 0.5, 2.0)
        labels = np.array([1, 1, 1, 2, 2, 2, 3, 3, 3])
        xs = np.linspace(-4.0, 4.0, 9)[:, None]
        sample = LabeledSample(xs=xs, labels=labels)
        bh = z_bh(sample, target, family)
        rb = z_rb(sample, target, family)
        assert bh.z_hat == pytest.approx(rb.z_hat, rel=1e-14)


class TestZRb:
    def test_hand_computed_mean(self):
        target, family = make_running_example(3, 0.5, 2.0)
        sample = draw_labeled_sample(family, 20, np.random.default_rng(7))
        rep = z_rb(sample, target, family)
        ratios = np.exp(target.log_density(sample.xs) - family.log_mixture_density(sample.xs))
        assert rep.z_hat == pytest.approx(ratios.mean(), rel=1e-13)

    def test_rough_consistency_with_unit_constant(self):
        target, family = make_running_example(3, 0.5, 2.0)
        sample = draw_labeled_sample(family, 8000, np.random.default_rng(8))
        rep = z_rb(sample, target, family)
        ratios = np.exp(target.log_density(sample.xs) - family.log_mixture_density(sample.xs))
        se = ratios.std(ddof=1) / math.sqrt(sample.n)
        assert abs(rep.z_hat - 1.0) < 4.0 * se

    def test_variance_matches_second_moment_by_quadrature(self):
        """The estimator is an iid mean, so N * var equals tau - 1 with
        tau = integral pi^2 / qbar computed by quadrature."""
        from zmix.oracles import quadrature_tau, replicate

        target, family = make_running_example(3, 0.5, 2.0)
        tau_mix = quadrature_tau(
            target, lambda xs, i: family.log_mixture_density(xs), [1]
        )[0]

        def one(stream):
            sample = draw_labeled_sample(family, 50, stream.generator())
            return z_rb(sample, target, family).z_hat

        summary = replicate(one, 2000, RngStream(seed=100))
        expected_var = (tau_mix - 1.0) / 50.0
        assert abs(summary.variance - expected_var) < 4.0 * summary.se_variance

    def test_count_conditioning_beats_full_mixture_here(self):
        """With far-apart components and a centered target, the
        count-weighted denominator adapts to the labels that actually
        landed, while the full mixture keeps paying for the mismatched
        components; on this instance the count-weighted spread is visibly
        smaller.  (Neither direction holds universally.)"""
        target, family = make_running_example(3, 0.5, 2.0)
        reps_bh, reps_rb = [], []
        for r in range(300):
            gen = RngStream(seed=100, address=(r,)).generator()
            sample = draw_labeled_sample(family, 50, gen)
            reps_bh.append(z_bh(sample, target, family).z_hat)
            reps_rb.append(z_rb(sample, target, family).z_hat)
        assert np.var(reps_bh, ddof=1) < np.var(reps_rb, ddof=1)

    def test_absolute_continuity_guard(self):
        """A point with target mass where every proposal density vanishes
        must raise, not return a silently truncated estimate.  The family is
        built on the generic fallbacks so the clipped component is the only
        density route."""
        from zmix.core import TractableProposalFamily

        reference = GaussianGridFamily(K=1, m=0.5, s=2.0)

        class ClippedFamily(TractableProposalFamily):
            dim = 1
            K = 1

            def log_component_density(self, label, xs):
                pts = as_point_batch(xs, 1)[:, 0]
                vals = reference.log_component_density(label, xs)
                return np.where(np.abs(pts) > 2.0, -np.inf, vals)

            def sample_component(self, label, rng, size):
                raise NotImplementedError

            def label_log_pmf(self, labels):
                return np.zeros(np.asarray(labels).shape)

            def sample_labels(self, rng, size):
                return np.ones(size, dtype=np.int64)

        clipped = ClippedFamily()
        target = _target_from_component(reference, 1)
        sample = LabeledSample(xs=np.array([[3.0]]), labels=np.array([1]))
        with pytest.raises(AbsoluteContinuityError):
            z_rb(sample, target, clipped)
        with pytest.raises(AbsoluteContinuityError):
            z_bh(sample, target, clipped)
