"""Shared contracts: targets, proposal families, samples, counts, RNG streams.

Conventions used across the package:

* Points are real vectors of length ``dim``; batches of points are arrays of
  shape ``(M, dim)``.
* Labels are integers in ``1..K``; label vectors are int arrays.  Positions
  inside a sample are 1-based as well, matching the usual statement of these
  estimators.
* Densities are exposed in log space.  ``-inf`` marks a zero density and is
  legal anywhere a log density is consumed; ``+inf`` and NaN are contract
  violations and rejected eagerly.  Linear-space values appear only at
  accumulation points, via shifted sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "AbsoluteContinuityError",
    "CountsView",
    "JointProposal",
    "LabeledSample",
    "RngStream",
    "TractableProposalFamily",
    "UnnormalizedTarget",
    "adapt_tractable_as_joint",
    "as_point_batch",
    "counts_from_labels",
    "counts_from_sample",
    "draw_labeled_sample",
    "k_eff",
    "logsumexp",
]


class AbsoluteContinuityError(ValueError):
    """A point carrying positive weight met a zero proposal density."""


def as_point_batch(xs: np.ndarray, dim: int) -> np.ndarray:
    """Coerce ``xs`` to a float array of shape ``(M, dim)``."""
    arr = np.asarray(xs, dtype=float)
    if arr.ndim == 1:
        if dim == 1:
            arr = arr[:, None]
        elif arr.shape[0] == dim:
            arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected points of shape (M, {dim}), got {arr.shape}")
    return arr


def logsumexp(a: np.ndarray, axis=None, b: np.ndarray | None = None) -> np.ndarray:
    """Shifted log-sum-exp that tolerates all-(-inf) slices (returns -inf)."""
    a = np.asarray(a, dtype=float)
    hi = np.max(a, axis=axis, keepdims=True) if a.size else np.array(-np.inf)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    terms = np.exp(a - hi)
    if b is not None:
        terms = terms * b
    s = np.sum(terms, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + hi
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _check_log_values(vals: np.ndarray, what: str) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if np.isnan(vals).any() or np.isposinf(vals).any():
        raise ValueError(f"{what} produced NaN or +inf log values")
    return vals


@dataclass(frozen=True)
class UnnormalizedTarget:
    """An unnormalized density; the integral of ``exp(log density)`` is the estimand.

    ``log_unnorm_density`` maps a point batch ``(M, dim)`` to ``(M,)`` log
    values; ``-inf`` is allowed, NaN and ``+inf`` are errors.
    """

    dim: int
    log_unnorm_density: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")

    def log_density(self, xs: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, self.dim)
        return _check_log_values(self.log_unnorm_density(pts), "target")


class TractableProposalFamily:
    """``K`` component densities plus a label distribution over ``1..K``.

    Subclasses implement the four primitive hooks; the batched helpers have
    generic fallbacks so simple families only provide the primitives.
    Instances are treated as immutable after construction.
    """

    dim: int
    K: int

    # ---- primitives -------------------------------------------------------

    def log_component_density(self, label: int, xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_component(self, label: int, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def label_log_pmf(self, labels) -> np.ndarray:
        """Log pmf of the label distribution, elementwise over ``labels``."""
        raise NotImplementedError

    def sample_labels(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    # ---- derived helpers --------------------------------------------------

    def _check_labels(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 1 or labels.max() > self.K):
            raise ValueError(f"labels must lie in 1..{self.K}")
        return labels.astype(np.int64, copy=False)

    def sample_label(self, rng: np.random.Generator) -> int:
        return int(self.sample_labels(rng, 1)[0])

    def log_component_density_matrix(self, labels: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """``(M, L)`` matrix of per-component log densities for the given labels."""
        labels = self._check_labels(labels)
        cols = [self.log_component_density(int(l), xs) for l in labels]
        return np.stack(cols, axis=1) if cols else np.empty((as_point_batch(xs, self.dim).shape[0], 0))

    def log_pairwise_density(self, xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """``log q_{l_n}(x_n)`` for aligned points and labels."""
        labels = self._check_labels(labels)
        pts = as_point_batch(xs, self.dim)
        out = np.empty(pts.shape[0])
        for lab in np.unique(labels):
            idx = np.flatnonzero(labels == lab)
            out[idx] = self.log_component_density(int(lab), pts[idx])
        return out

    def sample_points(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one point per label, grouped by distinct label in sorted order."""
        labels = self._check_labels(labels)
        out = np.empty((labels.shape[0], self.dim))
        for lab in np.unique(labels):
            idx = np.flatnonzero(labels == lab)
            out[idx] = self.sample_component(int(lab), rng, idx.size)
        return out

    def log_mixture_density(self, xs: np.ndarray) -> np.ndarray:
        """``log sum_k alpha_k q_k(x)`` over the full family."""
        all_labels = np.arange(1, self.K + 1)
        mat = self.log_component_density_matrix(all_labels, xs)
        return logsumexp(mat + self.label_log_pmf(all_labels)[None, :], axis=1)

    def grouped_log_denominator(self, xs: np.ndarray, counts: "CountsView") -> np.ndarray:
        """``log sum_l N_l q_l(x)`` accumulated over the occupied labels only."""
        support = np.asarray(counts.support, dtype=np.int64)
        mat = self.log_component_density_matrix(support, xs)
        logn = np.log([counts.counts[int(l)] for l in support])
        return logsumexp(mat + logn[None, :], axis=1)


@dataclass(frozen=True)
class LabeledSample:
    """Ordered draws ``(x_n, l_n)``, stored as aligned arrays."""

    xs: np.ndarray      # (N, dim) float
    labels: np.ndarray  # (N,) int, values in 1..K

    def __post_init__(self) -> None:
        xs = np.asarray(self.xs, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if xs.ndim != 2:
            raise ValueError("xs must have shape (N, dim)")
        if labels.shape != (xs.shape[0],):
            raise ValueError("labels must align with xs")
        if xs.shape[0] < 1:
            raise ValueError("a sample holds at least one draw")
        if labels.min() < 1:
            raise ValueError("labels are 1-based positive integers")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


@dataclass(frozen=True)
class CountsView:
    """Occupancy view of a label vector.

    ``counts`` maps each occupied label to its multiplicity; ``positions``
    maps it to the 1-based positions where it occurs, in increasing order.
    """

    n_total: int
    counts: Mapping[int, int]
    positions: Mapping[int, np.ndarray]

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(sorted(self.counts))

    def count_vector(self, K: int) -> np.ndarray:
        out = np.zeros(K, dtype=np.int64)
        for lab, c in self.counts.items():
            if lab > K:
                raise ValueError(f"label {lab} exceeds K={K}")
            out[lab - 1] = c
        return out


def counts_from_labels(labels: np.ndarray) -> CountsView:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size < 1:
        raise ValueError("labels must be a nonempty 1-d int array")
    if labels.min() < 1:
        raise ValueError("labels are 1-based positive integers")
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    boundaries = np.flatnonzero(np.diff(sorted_labels)) + 1
    groups = np.split(order, boundaries)
    counts: dict[int, int] = {}
    positions: dict[int, np.ndarray] = {}
    for grp in groups:
        lab = int(labels[grp[0]])
        counts[lab] = grp.size
        positions[lab] = np.sort(grp) + 1
    return CountsView(n_total=labels.size, counts=counts, positions=positions)


def counts_from_sample(sample: LabeledSample) -> CountsView:
    return counts_from_labels(sample.labels)


def k_eff(counts: CountsView) -> int:
    """Number of distinct labels actually drawn."""
    return len(counts.counts)


class JointProposal:
    """A joint density over ``(point, label)`` pairs that can be sampled and
    evaluated pairwise.  This is the only interface the auxiliary-policy,
    per-label and generalized estimators are allowed to consume."""

    dim: int
    K: int

    def sample_joint(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(xs, labels)`` with shapes ``(size, dim)`` and ``(size,)``."""
        raise NotImplementedError

    def log_joint_density(self, xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_joint_density_matrix(self, labels: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """``(M, L)`` joint log densities of every point against each label."""
        labels = np.asarray(labels, dtype=np.int64)
        pts = as_point_batch(xs, self.dim)
        cols = [self.log_joint_density(pts, np.full(pts.shape[0], int(l))) for l in labels]
        return np.stack(cols, axis=1) if cols else np.empty((pts.shape[0], 0))

    def draw_sample(self, n: int, rng: np.random.Generator) -> LabeledSample:
        xs, labels = self.sample_joint(rng, n)
        return LabeledSample(xs=xs, labels=labels)


class _AdaptedJoint(JointProposal):
    """Joint proposal induced by a tractable family: draw a label from the
    label distribution, then a point from that component."""

    def __init__(self, family: TractableProposalFamily):
        self.family = family
        self.dim = family.dim
        self.K = family.K

    def sample_joint(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        labels = self.family.sample_labels(rng, size)
        xs = self.family.sample_points(labels, rng)
        return xs, labels

    def log_joint_density(self, xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        return self.family.log_pairwise_density(xs, labels) + self.family.label_log_pmf(labels)

    def log_joint_density_matrix(self, labels: np.ndarray, xs: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        mat = self.family.log_component_density_matrix(labels, xs)
        return mat + self.family.label_log_pmf(labels)[None, :]


def adapt_tractable_as_joint(family: TractableProposalFamily) -> JointProposal:
    """View a tractable family as a joint proposal over ``(point, label)``."""
    return _AdaptedJoint(family)


def draw_labeled_sample(
    family: TractableProposalFamily, n: int, rng: np.random.Generator
) -> LabeledSample:
    """Draw ``n`` labels from the label distribution, then one point per label.

    The draw order (all labels first, then points aligned with positions) is
    part of the contract so that independently written callers can reproduce
    a sample bit for bit from the same generator state.
    """
    if n < 1:
        raise ValueError("n must be positive")
    labels = family.sample_labels(rng, n)
    xs = family.sample_points(labels, rng)
    return LabeledSample(xs=xs, labels=labels)


@dataclass(frozen=True)
class RngStream:
    """Deterministic splittable randomness keyed by ``(seed, address)``.

    The same seed and address always yield the same draw sequence, no matter
    in which order substreams are created or consumed, so replicate-, task-
    and particle-level parallelism cannot change results.  Substreams extend
    the address tuple; ``generator()`` opens a counter-based generator at the
    current address.
    """

    seed: int
    address: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not all(isinstance(a, (int, np.integer)) and a >= 0 for a in self.address):
            raise ValueError("address components must be nonnegative integers")

    def substream(self, *indices: int) -> "RngStream":
        return RngStream(self.seed, self.address + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.address)
        return np.random.Generator(np.random.Philox(ss))
