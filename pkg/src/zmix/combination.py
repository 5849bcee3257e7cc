"""Estimators that only see the joint ``(point, label)`` proposal, plus the
machinery for optimally recombining per-label estimates.

These cover the setting where the label-selection probabilities cannot be
evaluated pointwise: an auxiliary label policy replaces them (``z_beta``),
per-label estimates are formed and recombined with weights derived from the
estimated second-moment vector (``z_comb``), and a generalized family swaps
in positional surrogate functions with occupancy-based slot weights
(``z_gf``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from zmix.core import (
    AbsoluteContinuityError,
    CountsView,
    JointProposal,
    LabeledSample,
    UnnormalizedTarget,
    as_point_batch,
    counts_from_sample,
    k_eff,
    logsumexp,
)
from zmix.estimators import EstimateReport, report_from_log_terms

__all__ = [
    "BetaPolicy",
    "GfConfig",
    "SingularCovarianceError",
    "TauVector",
    "WeightSimplex",
    "beta_opt",
    "gf1_config",
    "gf2_config",
    "gf_normalizer_exact",
    "optimal_weights",
    "project_to_simplex",
    "sigma_inverse_action",
    "tau_hat",
    "uniform_policy",
    "z_beta",
    "z_comb",
    "z_gf",
    "z_i_per_label",
]


class SingularCovarianceError(ValueError):
    """The rank-one-update denominator fell below the pivot tolerance."""


@dataclass(frozen=True)
class BetaPolicy:
    """Auxiliary label policy ``beta_x(l)``, evaluated pairwise in log space.

    ``log_beta(xs, labels)`` must form a probability vector over ``1..K`` at
    each fixed point.  ``cost_per_point`` counts the extra joint-density
    evaluations one policy lookup performs at a single point.
    """

    kind: str
    K: int
    log_beta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    cost_per_point: int = 0

    def log_beta_matrix(self, xs: np.ndarray) -> np.ndarray:
        """``(M, K)`` policy log probabilities, for normalization checks."""
        pts = np.asarray(xs, dtype=float)
        cols = [
            self.log_beta(pts, np.full(pts.shape[0], lab, dtype=np.int64))
            for lab in range(1, self.K + 1)
        ]
        return np.stack(cols, axis=1)


def uniform_policy(K: int) -> BetaPolicy:
    """The constant policy ``beta_x(l) = 1/K``."""
    if K < 1:
        raise ValueError("K must be positive")
    log_k = math.log(K)

    def log_beta(xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(xs).shape[0], -log_k)

    return BetaPolicy(kind="uniform", K=K, log_beta=log_beta, cost_per_point=0)


def beta_opt(joint: JointProposal) -> BetaPolicy:
    """Variance-optimal policy: the joint's own label posterior at each point.

    ``beta_x(l) = qbar(x, l) / sum_k qbar(x, k)``; evaluating it costs K
    joint-density lookups per point.
    """
    all_labels = np.arange(1, joint.K + 1)

    def log_beta(xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, joint.dim)
        labels = np.asarray(labels, dtype=np.int64)
        mat = joint.log_joint_density_matrix(all_labels, pts)
        denom = logsumexp(mat, axis=1)
        if np.isneginf(denom).any():
            raise AbsoluteContinuityError("joint density vanished at a policy point")
        return mat[np.arange(pts.shape[0]), labels - 1] - denom

    return BetaPolicy(kind="optimal", K=joint.K, log_beta=log_beta, cost_per_point=joint.K)


def z_beta(
    sample: LabeledSample,
    target: UnnormalizedTarget,
    joint: JointProposal,
    policy: BetaPolicy,
) -> EstimateReport:
    """Policy-weighted estimate ``(1/N) sum_n target(x_n) beta_{x_n}(l_n) / qbar(x_n, l_n)``."""
    if policy.K != joint.K:
        raise ValueError("policy and joint proposal disagree on K")
    counts = counts_from_sample(sample)
    log_pi = target.log_density(sample.xs)
    log_q = joint.log_joint_density(sample.xs, sample.labels)
    log_b = policy.log_beta(sample.xs, sample.labels)
    log_num = log_pi + log_b
    bad = np.isneginf(log_q) & (log_num > -np.inf)
    if bad.any():
        raise AbsoluteContinuityError("joint density vanished under positive policy mass")
    with np.errstate(invalid="ignore"):
        log_terms = np.where(np.isneginf(log_num), -np.inf, log_num - log_q)
    cost = sample.n * (1 + policy.cost_per_point)
    return report_from_log_terms(log_terms, -math.log(sample.n), k_eff(counts), cost)


def z_i_per_label(
    sample: LabeledSample, target: UnnormalizedTarget, joint: JointProposal
) -> np.ndarray:
    """Length-K vector of per-label estimates, zero where a label never occurs.

    Entry ``i`` averages ``target(x) / qbar(x, i)`` over the points that drew
    label ``i`` and divides by the full sample size, so each occupied entry is
    itself an unbiased estimate of the constant.
    """
    counts = counts_from_sample(sample)
    out = np.zeros(joint.K)
    for lab, pos in counts.positions.items():
        pts = sample.xs[pos - 1]
        log_pi = target.log_density(pts)
        log_q = joint.log_joint_density(pts, np.full(pos.size, lab, dtype=np.int64))
        alive = log_pi > -np.inf
        if (alive & np.isneginf(log_q)).any():
            raise AbsoluteContinuityError(f"joint density vanished on label {lab}")
        terms = np.where(alive, log_pi - log_q, -np.inf)
        out[lab - 1] = math.exp(logsumexp(terms) - math.log(sample.n))
    return out


@dataclass(frozen=True)
class TauVector:
    """Per-label second moments ``tau_i``, kept in log space.

    The linear values can overflow for labels the joint proposal almost never
    produces; downstream weight computations therefore consume ``inv_tau``,
    which only ever underflows harmlessly to zero.
    """

    log_tau: np.ndarray

    def __post_init__(self) -> None:
        lt = np.asarray(self.log_tau, dtype=float)
        if lt.ndim != 1 or lt.size < 1:
            raise ValueError("log_tau must be a nonempty vector")
        if np.isnan(lt).any() or np.isposinf(lt).any():
            raise ValueError("log_tau entries must be finite")
        object.__setattr__(self, "log_tau", lt)

    @classmethod
    def from_linear(cls, tau) -> "TauVector":
        tau = np.asarray(tau, dtype=float)
        if (tau <= 0).any():
            raise ValueError("tau entries must be positive")
        return cls(log_tau=np.log(tau))

    @property
    def K(self) -> int:
        return self.log_tau.shape[0]

    @property
    def tau(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_tau)

    @property
    def inv_tau(self) -> np.ndarray:
        return np.exp(-self.log_tau)


def tau_hat(
    sample: LabeledSample, target: UnnormalizedTarget, joint: JointProposal
) -> TauVector:
    """Self-normalized estimate of the per-label second-moment vector.

    Uses the uniform-policy importance weights of the sample itself, so it
    needs no extra draws; one call costs ``N * (K + 1)`` joint evaluations.
    """
    log_pi = target.log_density(sample.xs)
    log_q_own = joint.log_joint_density(sample.xs, sample.labels)
    if np.isneginf(log_q_own).any():
        raise AbsoluteContinuityError("joint density vanished at a sample point")
    log_w = log_pi - math.log(joint.K) - log_q_own
    log_w_sum = logsumexp(log_w)
    if log_w_sum == -np.inf:
        raise ValueError("all self-normalized weights vanished")
    all_labels = np.arange(1, joint.K + 1)
    mat = joint.log_joint_density_matrix(all_labels, sample.xs)  # (N, K)
    if np.isneginf(mat).any():
        raise AbsoluteContinuityError("joint density vanished at a moment point")
    log_ratio = log_pi[:, None] - mat
    log_tau = (
        math.log(sample.n)
        + logsumexp(log_w[:, None] + log_ratio, axis=0)
        - 2.0 * log_w_sum
    )
    return TauVector(log_tau=log_tau)


def sigma_inverse_action(tau: TauVector, pivot_tol: float = 1e-12) -> Callable[[np.ndarray], np.ndarray]:
    """Action ``v -> Sigma^{-1} v`` for ``Sigma = diag(tau) - 11^T``.

    Implements the standard rank-one-update identity
    ``(T - 11^T)^{-1} = T^{-1} + T^{-1} 1 1^T T^{-1} / (1 - 1^T T^{-1} 1)``
    using only ``1/tau`` so enormous moments degrade gracefully.  A
    denominator within ``pivot_tol`` of zero is reported as singular.
    """
    inv_t = tau.inv_tau
    denom = 1.0 - float(inv_t.sum())
    if abs(denom) < pivot_tol:
        raise SingularCovarianceError(f"rank-one denominator {denom:.3e} below tolerance")

    def action(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        base = inv_t * v
        return base + inv_t * (base.sum() / denom)

    return action


@dataclass(frozen=True)
class WeightSimplex:
    """Combination weights summing to one; negative entries are flagged, kept."""

    nu: np.ndarray
    negative_flags: np.ndarray

    def __post_init__(self) -> None:
        nu = np.asarray(self.nu, dtype=float)
        if not np.isfinite(nu).all():
            raise ValueError("weights must be finite")
        if abs(nu.sum() - 1.0) > 1e-10:
            raise ValueError("weights must sum to one")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "negative_flags", np.asarray(self.negative_flags, dtype=bool))

    @property
    def any_negative(self) -> bool:
        return bool(self.negative_flags.any())


def optimal_weights(tau: TauVector, pivot_tol: float = 1e-12) -> WeightSimplex:
    """Minimum-variance combination weights ``nu_i ~ e_i^T Sigma^{-1} 1``.

    Solved through :func:`sigma_inverse_action`; the normalization makes the
    weights scale-free in Sigma.  Negative entries (possible for general
    moment vectors) are flagged, never clipped.
    """
    action = sigma_inverse_action(tau, pivot_tol)
    raw = action(np.ones(tau.K))
    total = raw.sum()
    if abs(total) < pivot_tol:
        raise SingularCovarianceError("weight normalizer vanished")
    nu = raw / total
    return WeightSimplex(nu=nu, negative_flags=nu < 0.0)


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (optional cleanup)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - 1.0
    rho = np.nonzero(u * np.arange(1, v.size + 1) > cssv)[0][-1]
    theta = cssv[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def z_comb(
    sample: LabeledSample, target: UnnormalizedTarget, joint: JointProposal
) -> EstimateReport:
    """Optimally weighted recombination of the per-label estimates.

    The weights come from the estimated second-moment vector; the headline
    value restricts them to the labels actually drawn and renormalizes over
    that support, while the unrestricted combination is kept in diagnostics.
    A singular weight system falls back to uniform weights on the support.
    """
    counts = counts_from_sample(sample)
    zi = z_i_per_label(sample, target, joint)
    support = counts.count_vector(joint.K) > 0
    n_support = int(support.sum())
    singular = 0.0
    negative = 0.0
    try:
        simplex = optimal_weights(tau_hat(sample, target, joint))
        nu = simplex.nu
        negative = float(simplex.negative_flags.sum())
    except SingularCovarianceError:
        singular = 1.0
        nu = np.full(joint.K, 1.0 / joint.K)
    support_total = float(nu[support].sum())
    if support_total <= 0.0:
        singular = 1.0
        support_total = 1.0
        nu = np.where(support, 1.0 / n_support, 0.0)
    z = float(np.dot(nu[support] / support_total, zi[support]))
    diagnostics = {
        "support_size": float(n_support),
        "negative_weights": negative,
        "singular_fallback": singular,
        "z_comb_unrestricted": float(np.dot(nu, zi)),
    }
    cost = sample.n * (joint.K + 1) + sample.n  # moment estimation plus per-label pass
    return EstimateReport(
        z_hat=max(z, 0.0),
        log_z_hat=math.log(z) if z > 0.0 else -math.inf,
        k_eff=k_eff(counts),
        cost_units=cost,
        diagnostics=diagnostics,
    )


@dataclass(frozen=True)
class GfConfig:
    """Positional surrogates and slot weights for the generalized estimator.

    ``log_surrogate(n, xs)`` evaluates slot ``n``'s surrogate function (1-based)
    at arbitrary points; ``log_surrogate_sum(xs)`` is the log of the sum over
    all slots; ``log_slot_weight[n-1]`` is the slot's fixed log weight.
    ``constant_surrogate`` marks the surrogate-free case whose population
    normalizer is exactly one; ``sum_evals_per_point`` is the density-eval
    cost of one surrogate-sum lookup.
    """

    n_slots: int
    log_slot_weight: np.ndarray
    log_surrogate: Callable[[int, np.ndarray], np.ndarray]
    log_surrogate_sum: Callable[[np.ndarray], np.ndarray]
    constant_surrogate: bool
    sum_evals_per_point: int = 0
    log_surrogate_pairwise: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.log_slot_weight, dtype=float)
        if w.shape != (self.n_slots,):
            raise ValueError("log_slot_weight must have one entry per slot")
        if np.isnan(w).any() or np.isposinf(w).any():
            raise ValueError("slot weights must be finite or zero")
        object.__setattr__(self, "log_slot_weight", w)

    def surrogate_pairwise(self, xs: np.ndarray, slots: np.ndarray) -> np.ndarray:
        """``log psi_{slots[i]}(xs[i])`` for aligned points and 1-based slots."""
        if self.log_surrogate_pairwise is not None:
            return self.log_surrogate_pairwise(xs, slots)
        xs = np.asarray(xs, dtype=float)
        out = np.empty(xs.shape[0])
        for i, n in enumerate(np.asarray(slots, dtype=np.int64)):
            out[i] = self.log_surrogate(int(n), xs[i][None, :])[0]
        return out


def _occupancy_log_weights(counts: CountsView, K: int, labels: np.ndarray) -> np.ndarray:
    """Slot weights ``(1/K - 1 + N_{l_n}) / N``; positive since every drawn
    label has occupancy at least one."""
    n = counts.n_total
    occ = counts.count_vector(K)[labels - 1].astype(float)
    w = (1.0 / K - 1.0 + occ) / n
    return np.log(w)


def gf1_config(counts: CountsView, K: int, n_slots: int) -> GfConfig:
    """Constant surrogates with occupancy slot weights (normalizer exactly 1)."""
    if counts.n_total != n_slots:
        raise ValueError("counts and n_slots disagree")
    labels = np.empty(n_slots, dtype=np.int64)
    for lab, pos in counts.positions.items():
        labels[pos - 1] = lab
    log_w = _occupancy_log_weights(counts, K, labels)

    def log_surrogate(n: int, xs: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(xs).shape[0])

    log_n = math.log(n_slots)

    def log_surrogate_sum(xs: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(xs).shape[0], log_n)

    return GfConfig(
        n_slots=n_slots,
        log_slot_weight=log_w,
        log_surrogate=log_surrogate,
        log_surrogate_sum=log_surrogate_sum,
        constant_surrogate=True,
        sum_evals_per_point=0,
        log_surrogate_pairwise=lambda xs, slots: np.zeros(np.asarray(xs).shape[0]),
    )


def gf2_config(
    sample: LabeledSample, joint: JointProposal, counts: CountsView, K: int, n_slots: int
) -> GfConfig:
    """Joint-density surrogates ``psi_n = qbar(., l_n)`` with occupancy weights.

    The slot's own label is frozen at configuration time, so the surrogates
    stay evaluable as the points move (annealing relies on this).  The
    population normalizer is not guaranteed to be one here.
    """
    if counts.n_total != n_slots or sample.n != n_slots:
        raise ValueError("sample, counts and n_slots disagree")
    labels = sample.labels.copy()
    log_w = _occupancy_log_weights(counts, K, labels)
    support = np.asarray(sorted(counts.counts), dtype=np.int64)
    occupancy = np.array([counts.counts[int(l)] for l in support], dtype=float)

    def log_surrogate(n: int, xs: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, joint.dim)
        lab = np.full(pts.shape[0], labels[n - 1], dtype=np.int64)
        return joint.log_joint_density(pts, lab)

    def log_surrogate_sum(xs: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, joint.dim)
        mat = joint.log_joint_density_matrix(support, pts)
        return logsumexp(mat + np.log(occupancy)[None, :], axis=1)

    def log_surrogate_pairwise(xs: np.ndarray, slots: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, joint.dim)
        slots = np.asarray(slots, dtype=np.int64)
        return joint.log_joint_density(pts, labels[slots - 1])

    return GfConfig(
        n_slots=n_slots,
        log_slot_weight=log_w,
        log_surrogate=log_surrogate,
        log_surrogate_sum=log_surrogate_sum,
        constant_surrogate=False,
        sum_evals_per_point=support.size,
        log_surrogate_pairwise=log_surrogate_pairwise,
    )


def z_gf(
    sample: LabeledSample,
    target: UnnormalizedTarget,
    joint: JointProposal,
    cfg: GfConfig,
) -> EstimateReport:
    """Generalized estimate with surrogate functions and slot weights.

    ``sum_n target(x_n) psi_n(x_n) w_n / (qbar(x_n, l_n) sum_m psi_m(x_n))``.
    With constant surrogates the population normalizer is exactly one and the
    estimate is unbiased; otherwise the normalizer is configuration
    dependent, which the diagnostics record.
    """
    if cfg.n_slots != sample.n:
        raise ValueError("config and sample disagree on the slot count")
    counts = counts_from_sample(sample)
    log_pi = target.log_density(sample.xs)
    log_q = joint.log_joint_density(sample.xs, sample.labels)
    if np.isneginf(log_q).any():
        raise AbsoluteContinuityError("joint density vanished at a sample point")
    log_own = cfg.surrogate_pairwise(sample.xs, np.arange(1, sample.n + 1))
    log_sum = cfg.log_surrogate_sum(sample.xs)
    log_terms = log_pi + log_own + cfg.log_slot_weight - log_q - log_sum
    log_terms = np.where(np.isneginf(log_pi), -np.inf, log_terms)
    cost = sample.n * (1 + cfg.sum_evals_per_point)
    diagnostics = {"normalizer_guaranteed": 1.0 if cfg.constant_surrogate else 0.0}
    return report_from_log_terms(log_terms, 0.0, k_eff(counts), cost, diagnostics)


def gf_normalizer_exact(
    config_builder: Callable[[LabeledSample], GfConfig],
    target: UnnormalizedTarget,
    joint: JointProposal,
    alpha: np.ndarray,
    n_slots: int,
    quad,
    tol: float = 1e-8,
) -> float:
    """Exact population normalizer of the generalized estimator, tiny instances.

    Enumerates every label vector, rebuilds the configuration the builder
    would produce for it, and integrates the surrogate-share expression under
    the normalized target by quadrature:
    ``E[ sum_n psi_n(X) (w_n / alpha(l_n)) / sum_m psi_m(X) ]``.
    """
    from zmix.oracles import InstanceTooLargeError, quadrature_integral, quadrature_z

    alpha = np.asarray(alpha, dtype=float)
    K = alpha.shape[0]
    if n_slots > 4 or K > 3:
        raise InstanceTooLargeError("normalizer enumeration handles N<=4, K<=3 only")
    if joint.dim != 1:
        raise InstanceTooLargeError("normalizer enumeration handles 1-d points only")
    z = quadrature_z(target, quad, tol)

    import itertools

    total = 0.0
    placeholder = np.zeros((n_slots, 1))
    for combo in itertools.product(range(1, K + 1), repeat=n_slots):
        labels = np.asarray(combo, dtype=np.int64)
        weight = float(np.prod(alpha[labels - 1]))
        cfg = config_builder(LabeledSample(xs=placeholder, labels=labels))
        ratio_w = np.exp(cfg.log_slot_weight) / alpha[labels - 1]

        def log_integrand(xs, cfg=cfg, ratio_w=ratio_w):
            pts = np.asarray(xs, dtype=float)
            mat = np.stack(
                [cfg.log_surrogate(n, pts) for n in range(1, n_slots + 1)], axis=1
            )
            share = logsumexp(mat + np.log(ratio_w)[None, :], axis=1) - cfg.log_surrogate_sum(pts)
            return target.log_density(pts) + share

        total += weight * quadrature_integral(log_integrand, quad, tol) / z
    return total
