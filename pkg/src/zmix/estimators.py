"""One-shot estimators built on a tractable proposal family.

All of them turn a labeled sample into an estimate of the target's
normalizing constant.  ``z_mis`` is the generic weighted form for any
partition-of-unity weight set; ``z_bh`` specializes it to count-proportional
weights, which lets the per-point denominator collapse onto the occupied
labels; ``z_rb`` averages against the full mixture instead and therefore
touches every component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from zmix.core import (
    AbsoluteContinuityError,
    CountsView,
    LabeledSample,
    TractableProposalFamily,
    UnnormalizedTarget,
    as_point_batch,
    counts_from_sample,
    k_eff,
    logsumexp,
)

__all__ = [
    "EstimateReport",
    "WeightFunctionSet",
    "bh_weights",
    "grouped_samples",
    "report_from_log_terms",
    "bh_log_denominator",
    "z_bh",
    "z_mis",
    "z_rb",
]

_MAX_EXP = 709.0  # log of the largest finite double


@dataclass(frozen=True)
class EstimateReport:
    """A single estimate with its accounting.

    ``log_z_hat`` is always the authoritative value; ``z_hat`` is its linear
    image and equals ``exp(log_z_hat)`` whenever that does not overflow.
    ``cost_units`` counts component/joint density evaluations.
    """

    z_hat: float
    log_z_hat: float
    k_eff: int
    cost_units: int
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if math.isnan(self.log_z_hat) or self.log_z_hat == math.inf:
            raise ValueError("log_z_hat must be finite or -inf")
        if not self.z_hat >= 0.0:
            raise ValueError("z_hat must be nonnegative")
        if self.k_eff < 0 or self.cost_units < 0:
            raise ValueError("k_eff and cost_units are nonnegative")


def report_from_log_terms(
    log_terms: np.ndarray,
    log_scale: float,
    keff: int,
    cost: int,
    diagnostics: Mapping[str, float] | None = None,
) -> EstimateReport:
    """Accumulate ``exp(log_terms) * exp(log_scale)`` into a report."""
    log_z = logsumexp(np.asarray(log_terms, dtype=float)) + log_scale
    diag = dict(diagnostics or {})
    if log_z > _MAX_EXP:
        z = math.inf
        diag["linear_overflow"] = 1.0
    else:
        z = math.exp(log_z)
    return EstimateReport(z_hat=z, log_z_hat=log_z, k_eff=keff, cost_units=cost, diagnostics=diag)


@dataclass(frozen=True)
class WeightFunctionSet:
    """Per-label weight functions forming a partition of unity.

    ``log_omega(label, xs)`` returns log weights in ``[-inf, 0]``; the linear
    accessor exponentiates.  Labels without support weight are ``-inf``.
    """

    K: int
    log_omega: Callable[[int, np.ndarray], np.ndarray]

    def omega(self, label: int, xs: np.ndarray) -> np.ndarray:
        return np.exp(self.log_omega(label, xs))


def bh_log_denominator(
    xs: np.ndarray, counts: CountsView, family: TractableProposalFamily
) -> tuple[np.ndarray, int]:
    """``log sum_l N_l q_l(x)`` over occupied labels, plus the evaluation count."""
    pts = as_point_batch(xs, family.dim)
    vals = family.grouped_log_denominator(pts, counts)
    return vals, pts.shape[0] * k_eff(counts)


def bh_weights(counts: CountsView, family: TractableProposalFamily) -> WeightFunctionSet:
    """Count-proportional weights ``omega_i(x) = N_i q_i(x) / sum_k N_k q_k(x)``.

    Denominators run over the occupied labels only; labels with zero count
    get weight zero everywhere.  A vanishing denominator at an evaluated
    point is an absolute-continuity violation.
    """
    if counts.n_total < 1:
        raise ValueError("counts must describe a nonempty sample")

    def log_omega(label: int, xs: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, family.dim)
        denom, _ = bh_log_denominator(pts, counts, family)
        if np.isneginf(denom).any():
            raise AbsoluteContinuityError("count-weighted denominator vanished at a point")
        if label not in counts.counts:
            return np.full(pts.shape[0], -np.inf)
        num = math.log(counts.counts[label]) + family.log_component_density(label, pts)
        return num - denom

    return WeightFunctionSet(K=family.K, log_omega=log_omega)


def grouped_samples(sample: LabeledSample) -> dict[int, np.ndarray]:
    """Split a labeled sample into per-label point blocks (position order)."""
    counts = counts_from_sample(sample)
    return {lab: sample.xs[pos - 1] for lab, pos in counts.positions.items()}


def z_mis(
    samples_by_component: Mapping[int, np.ndarray],
    weights: WeightFunctionSet,
    target: UnnormalizedTarget,
    family: TractableProposalFamily,
) -> EstimateReport:
    """Weighted multi-proposal estimate from per-component sample blocks.

    Each block contributes the mean of ``omega_i(x) * target(x) / q_i(x)``
    over its own draws; blocks are summed.  A point with zero target mass
    contributes exactly zero no matter what the densities below it do; a
    zero component density under positive weighted target mass is an error.
    """
    if not samples_by_component:
        raise ValueError("need at least one component block")
    log_terms = []
    n_total = 0
    for label in sorted(samples_by_component):
        pts = as_point_batch(samples_by_component[label], family.dim)
        if pts.shape[0] < 1:
            raise ValueError(f"component {label} has an empty block")
        n_i = pts.shape[0]
        n_total += n_i
        log_pi = target.log_density(pts)
        log_q = family.log_component_density(label, pts)
        log_w = weights.log_omega(label, pts)
        log_num = log_w + log_pi
        bad = np.isneginf(log_q) & (log_num > -np.inf)
        if bad.any():
            raise AbsoluteContinuityError(
                f"component {label} has zero density under positive weighted mass"
            )
        with np.errstate(invalid="ignore"):
            terms = np.where(np.isneginf(log_num), -np.inf, log_num - log_q)
        log_terms.append(terms - math.log(n_i))
    log_terms = np.concatenate(log_terms)
    keff = len(samples_by_component)
    cost = n_total * (keff + 1)
    return report_from_log_terms(log_terms, 0.0, keff, cost)


def z_bh(
    sample: LabeledSample, target: UnnormalizedTarget, family: TractableProposalFamily
) -> EstimateReport:
    """Count-weighted estimate ``sum_n target(x_n) / sum_m q_{l_m}(x_n)``.

    Algebraically identical to ``z_mis`` under ``bh_weights``; computed here
    in one grouped pass whose per-point cost scales with the number of
    occupied labels, not with K.
    """
    counts = counts_from_sample(sample)
    log_pi = target.log_density(sample.xs)
    log_denom, cost = bh_log_denominator(sample.xs, counts, family)
    alive = log_pi > -np.inf
    if (alive & np.isneginf(log_denom)).any():
        raise AbsoluteContinuityError("occupied-label denominator vanished under target mass")
    log_terms = np.where(alive, log_pi - log_denom, -np.inf)
    return report_from_log_terms(log_terms, 0.0, k_eff(counts), cost)


def z_rb(
    sample: LabeledSample, target: UnnormalizedTarget, family: TractableProposalFamily
) -> EstimateReport:
    """Mixture-denominator estimate ``(1/N) sum_n target(x_n) / qbar(x_n)``.

    ``qbar`` is the full label-averaged mixture, so every one of the K
    components is evaluated at every point regardless of which labels were
    drawn; that is the whole cost difference against ``z_bh``.
    """
    counts = counts_from_sample(sample)
    log_pi = target.log_density(sample.xs)
    log_mix = family.log_mixture_density(sample.xs)
    alive = log_pi > -np.inf
    if (alive & np.isneginf(log_mix)).any():
        raise AbsoluteContinuityError("mixture density vanished under target mass")
    log_terms = np.where(alive, log_pi - log_mix, -np.inf)
    cost = sample.n * family.K
    return report_from_log_terms(log_terms, -math.log(sample.n), k_eff(counts), cost)
