"""Independent oracles: quadrature, exhaustive enumeration, dense inversion,
replication with bootstrap errors, and exact rejection draws from the
extended annealed law on tiny instances.

Everything here is deliberately written against the raw density contracts in
:mod:`zmix.core`, not against the estimator modules, so that agreement
between an estimator and its oracle is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import simpson

from zmix.core import (
    RngStream,
    TractableProposalFamily,
    UnnormalizedTarget,
    as_point_batch,
)

__all__ = [
    "EnvelopeViolationError",
    "ExtendedDraws",
    "InstanceTooLargeError",
    "QuadratureError",
    "QuadratureSpec",
    "ReplicationSummary",
    "SingularMatrixError",
    "dense_inverse",
    "enumerate_label_expectation",
    "nested_simpson_ascending",
    "quadrature_integral",
    "quadrature_tau",
    "quadrature_z",
    "rejection_sample_extended",
    "replicate",
]

_BOOTSTRAP_ADDRESS = 0xB0075  # reserved substream index for resampling draws


class QuadratureError(RuntimeError):
    """The half-resolution error estimate exceeded the requested tolerance."""


class InstanceTooLargeError(ValueError):
    """The oracle was asked to enumerate or sample beyond its tiny-size bounds."""


class SingularMatrixError(ValueError):
    """Dense inversion met a pivot below tolerance."""


class EnvelopeViolationError(RuntimeError):
    """A rejection proposal exceeded its certified envelope."""


@dataclass(frozen=True)
class QuadratureSpec:
    """Uniform grid for composite Simpson integration on ``[lower, upper]``.

    ``points`` must be odd; the default resolution leaves plenty of headroom
    for the smooth integrands used in the tests.
    """

    lower: float = -12.0
    upper: float = 12.0
    points: int = 2001

    def __post_init__(self) -> None:
        if not self.upper > self.lower:
            raise ValueError("upper must exceed lower")
        if self.points < 3 or self.points % 2 == 0:
            raise ValueError("points must be an odd integer >= 3")

    def grid(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.points)


def quadrature_integral(
    log_fn: Callable[[np.ndarray], np.ndarray],
    spec: QuadratureSpec = QuadratureSpec(),
    tol: float = 1e-8,
) -> float:
    """Integrate ``exp(log_fn)`` on the grid, with a half-resolution check.

    The comparison against the every-other-point rule is a Richardson-style
    error estimate; exceeding ``tol`` raises :class:`QuadratureError` rather
    than returning a silently bad value.
    """
    if (spec.points - 1) % 4 != 0:
        raise ValueError("points must be 4k+1 so the grid can be halved")
    x = spec.grid()
    with np.errstate(over="ignore"):
        y = np.exp(np.asarray(log_fn(x[:, None]), dtype=float))
    if not np.all(np.isfinite(y)):
        raise QuadratureError("integrand is not finite on the grid")
    fine = float(simpson(y, x=x))
    coarse = float(simpson(y[::2], x=x[::2]))
    err = abs(fine - coarse) / 15.0
    if err > tol:
        raise QuadratureError(f"error estimate {err:.3e} exceeds tolerance {tol:.3e}")
    return fine


def quadrature_z(target: UnnormalizedTarget, spec: QuadratureSpec = QuadratureSpec(),
                 tol: float = 1e-8) -> float:
    """Normalizing constant of a 1-d target by composite Simpson."""
    if target.dim != 1:
        raise ValueError("quadrature_z handles 1-d targets only")
    return quadrature_integral(target.log_density, spec, tol)


def quadrature_tau(
    target: UnnormalizedTarget,
    log_joint_at_label: Callable[[np.ndarray, int], np.ndarray],
    labels: int | Sequence[int],
    spec: QuadratureSpec = QuadratureSpec(),
    tol: float = 1e-8,
) -> np.ndarray:
    """Per-label second moments ``tau_i = E_pi[ pi(X) / qbar(X, i) ]``.

    ``log_joint_at_label(xs, i)`` evaluates the joint proposal at a fixed
    label; the normalized target density enters squared, hence the division
    by the quadrature constant twice.  ``labels`` is either a count ``K``
    (labels 1..K) or an explicit label selection.
    """
    if isinstance(labels, (int, np.integer)):
        chosen = range(1, int(labels) + 1)
    else:
        chosen = [int(i) for i in labels]
    z = quadrature_z(target, spec, tol)
    out = np.empty(len(chosen))
    for pos, i in enumerate(chosen):
        def log_integrand(xs, i=i):
            return 2.0 * target.log_density(xs) - log_joint_at_label(xs, i)
        out[pos] = quadrature_integral(log_integrand, spec, tol) / (z * z)
    return out


def nested_simpson_ascending(
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    lower: float,
    upper: float,
    points: int = 401,
) -> float:
    """Integrate ``fn(x1, x2)`` over the wedge ``lower < x1 < x2 < upper``.

    Inner integrals run on a fresh grid from each ``x1`` to ``upper`` so the
    wedge boundary is respected exactly.
    """
    if points < 3 or points % 2 == 0:
        raise ValueError("points must be an odd integer >= 3")
    x1 = np.linspace(lower, upper, points)
    inner = np.empty(points)
    for i, a in enumerate(x1):
        x2 = np.linspace(a, upper, points)
        inner[i] = simpson(fn(np.full(points, a), x2), x=x2)
    return float(simpson(inner, x=x1))


def enumerate_label_expectation(
    f: Callable[[np.ndarray], float],
    alpha: np.ndarray,
    n_slots: int,
    limit: int = 1_000_000,
) -> float:
    """Exact ``E[f(L_1..L_N)]`` with labels iid from ``alpha`` (1-based).

    Walks all ``K**N`` label vectors; refuses instances beyond ``limit``.
    """
    alpha = np.asarray(alpha, dtype=float)
    K = alpha.shape[0]
    if K**n_slots > limit:
        raise InstanceTooLargeError(f"{K}**{n_slots} label vectors exceed limit {limit}")
    if abs(alpha.sum() - 1.0) > 1e-12 or (alpha < 0).any():
        raise ValueError("alpha must be a probability vector")
    total = 0.0
    for combo in itertools.product(range(1, K + 1), repeat=n_slots):
        labels = np.asarray(combo, dtype=np.int64)
        weight = float(np.prod(alpha[labels - 1]))
        total += weight * float(f(labels))
    return total


def dense_inverse(a: np.ndarray, pivot_tol: float = 1e-12, residual_tol: float = 1e-10,
                  max_size: int = 16) -> np.ndarray:
    """Invert a small dense matrix by Gauss-Jordan with partial pivoting.

    Kept deliberately free of library solvers so it can act as the second,
    independent route for the rank-one-update identity.  A pivot smaller than
    ``pivot_tol`` (relative to the largest entry) raises
    :class:`SingularMatrixError`; the result is residual-checked.
    """
    a = np.asarray(a, dtype=float)
    k = a.shape[0]
    if a.shape != (k, k):
        raise ValueError("matrix must be square")
    if k > max_size:
        raise InstanceTooLargeError(f"dense_inverse handles sizes up to {max_size}")
    scale = np.max(np.abs(a)) or 1.0
    work = np.hstack([a.copy(), np.eye(k)])
    for col in range(k):
        pivot_row = col + int(np.argmax(np.abs(work[col:, col])))
        if abs(work[pivot_row, col]) < pivot_tol * scale:
            raise SingularMatrixError(f"pivot {work[pivot_row, col]:.3e} below tolerance")
        if pivot_row != col:
            work[[col, pivot_row]] = work[[pivot_row, col]]
        work[col] /= work[col, col]
        for row in range(k):
            if row != col and work[row, col] != 0.0:
                work[row] -= work[row, col] * work[col]
    inv = work[:, k:]
    residual = np.max(np.abs(a @ inv - np.eye(k)))
    if residual > residual_tol:
        raise SingularMatrixError(f"residual {residual:.3e} exceeds {residual_tol:.3e}")
    return inv


@dataclass
class ReplicationSummary:
    """Replicate values with bootstrap standard errors for the headline stats.

    ``values`` has shape ``(R,)`` or ``(R, d)``; moments are taken over the
    replicate axis.  Bootstrap errors use ``n_boot`` resamples drawn from a
    reserved substream so they never perturb the replicates themselves.
    """

    values: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    se_mean: np.ndarray
    se_variance: np.ndarray
    covariance: np.ndarray | None = None
    se_covariance: np.ndarray | None = None
    diagnostics: dict[str, float] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.values.shape[0]


def _bootstrap_indices(rng: np.random.Generator, r: int, n_boot: int, chunk: int = 64):
    done = 0
    while done < n_boot:
        b = min(chunk, n_boot - done)
        yield rng.integers(0, r, size=(b, r))
        done += b


def summarize_replicates(values: np.ndarray, stream: RngStream, n_boot: int = 1000) -> ReplicationSummary:
    """Moments plus bootstrap SEs over the replicate axis of ``values``."""
    values = np.asarray(values, dtype=float)
    r = values.shape[0]
    if r < 2:
        raise ValueError("need at least two replicates")
    vector = values.ndim == 2
    mean = values.mean(axis=0)
    variance = values.var(axis=0, ddof=1)
    covariance = np.cov(values.T, ddof=1) if vector else None

    rng = stream.substream(_BOOTSTRAP_ADDRESS).generator()
    boot_mean, boot_var, boot_cov = [], [], []
    for idx in _bootstrap_indices(rng, r, n_boot):
        res = values[idx]  # (b, R) or (b, R, d)
        boot_mean.append(res.mean(axis=1))
        boot_var.append(res.var(axis=1, ddof=1))
        if vector:
            centered = res - res.mean(axis=1, keepdims=True)
            boot_cov.append(
                np.einsum("bri,brj->bij", centered, centered) / (r - 1)
            )
    se_mean = np.concatenate(boot_mean).std(axis=0, ddof=1)
    se_variance = np.concatenate(boot_var).std(axis=0, ddof=1)
    se_covariance = np.concatenate(boot_cov).std(axis=0, ddof=1) if vector else None
    return ReplicationSummary(
        values=values,
        mean=mean,
        variance=variance,
        se_mean=se_mean,
        se_variance=se_variance,
        covariance=covariance,
        se_covariance=se_covariance,
    )


def replicate(
    fn: Callable[[RngStream], float | np.ndarray],
    n_replicates: int,
    stream: RngStream,
    n_boot: int = 1000,
) -> ReplicationSummary:
    """Run ``fn`` on substreams ``0..R-1`` and summarize the results.

    Each replicate owns the substream addressed by its index, so the set of
    values is independent of execution order or batching.
    """
    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    first = np.asarray(fn(stream.substream(0)), dtype=float)
    values = np.empty((n_replicates,) + first.shape)
    values[0] = first
    for r in range(1, n_replicates):
        values[r] = np.asarray(fn(stream.substream(r)), dtype=float)
    return summarize_replicates(values, stream, n_boot)


@dataclass(frozen=True)
class ExtendedDraws:
    """Exact draws from the annealed extended law on a tiny instance."""

    slots: np.ndarray       # (R,) selected slot index, 1-based
    xs: np.ndarray          # (R, N) points (1-d instances only)
    labels: np.ndarray      # (R, N) labels
    acceptance_rate: float
    envelope: float


def _tiny_log_potential(
    scheme: str,
    x_sel: np.ndarray,
    count_matrix: np.ndarray,
    gamma: float,
    family: TractableProposalFamily,
    target: UnnormalizedTarget,
) -> np.ndarray:
    """Potential of the selected slot against the occupancy of its row.

    Re-derived here (log target minus log of the count-weighted component
    sum, with the scheme's placement of gamma) so the oracle does not lean
    on the annealing module.
    """
    pts = x_sel[:, None]
    log_pi = target.log_density(pts)
    all_labels = np.arange(1, family.K + 1)
    log_q = family.log_component_density_matrix(all_labels, pts)  # (B, K)
    with np.errstate(divide="ignore"):
        log_counts = np.log(count_matrix)
    if scheme == "purely_geometric":
        shifted = log_q + log_counts
        hi = shifted.max(axis=1, keepdims=True)
        hi = np.where(np.isfinite(hi), hi, 0.0)
        log_denom = np.log(np.exp(shifted - hi).sum(axis=1)) + hi[:, 0]
        return gamma * (log_pi - log_denom)
    if scheme == "semi_geometric":
        shifted = gamma * log_q + log_counts
        hi = shifted.max(axis=1, keepdims=True)
        hi = np.where(np.isfinite(hi), hi, 0.0)
        log_denom = np.log(np.exp(shifted - hi).sum(axis=1)) + hi[:, 0]
        return gamma * log_pi - log_denom
    raise ValueError(f"unknown scheme {scheme!r}")


def rejection_sample_extended(
    family: TractableProposalFamily,
    target: UnnormalizedTarget,
    scheme: str,
    gamma: float,
    n_slots: int,
    n_draws: int,
    stream: RngStream,
    grid_points: int = 4001,
    margin: float = 1.05,
) -> ExtendedDraws:
    """Draw exactly from the annealed extended law by rejection.

    Proposals come from the raw product law (labels iid, one point per label,
    slot uniform); the acceptance ratio is the per-slot potential.  The
    envelope is certified on a fine grid per occupancy pattern, inflated by
    ``margin``, and violations abort the run.  Only tiny instances are
    allowed so the grid certification stays trustworthy.
    """
    if n_slots > 2 or family.K > 2 or family.dim != 1:
        raise InstanceTooLargeError("rejection oracle handles N<=2, K<=2, dim=1 only")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")

    grid = np.linspace(-12.0, 12.0, grid_points)
    sup = 0.0
    for combo in itertools.product(range(1, family.K + 1), repeat=n_slots):
        counts = np.bincount(np.asarray(combo), minlength=family.K + 1)[1:]
        cm = np.broadcast_to(counts.astype(float), (grid.size, family.K))
        u = _tiny_log_potential(scheme, grid, cm, gamma, family, target)
        sup = max(sup, float(np.exp(u).max()))
    envelope = sup * margin
    log_envelope = math.log(envelope)

    rng = stream.generator()
    batch = max(1024, n_draws)
    out_slots = np.empty(n_draws, dtype=np.int64)
    out_xs = np.empty((n_draws, n_slots))
    out_labels = np.empty((n_draws, n_slots), dtype=np.int64)
    got = 0
    proposed = 0
    while got < n_draws:
        labels = family.sample_labels(rng, batch * n_slots).reshape(batch, n_slots)
        xs = family.sample_points(labels.ravel(), rng).reshape(batch, n_slots)
        slots = rng.integers(1, n_slots + 1, size=batch)
        unif = rng.uniform(size=batch)
        count_matrix = np.stack(
            [np.bincount(row, minlength=family.K + 1)[1:] for row in labels]
        ).astype(float)
        x_sel = xs[np.arange(batch), slots - 1]
        u = _tiny_log_potential(scheme, x_sel, count_matrix, gamma, family, target)
        if np.any(u > log_envelope):
            raise EnvelopeViolationError("potential exceeded the certified envelope")
        accept = np.log(unif) < (u - log_envelope)
        hits = np.flatnonzero(accept)
        take = min(hits.size, n_draws - got)
        idx = hits[:take]
        # On the finishing batch, count only proposals up to the last draw we
        # actually keep, so the reported rate reflects the true per-proposal
        # acceptance probability.
        if got + take == n_draws and take > 0:
            proposed += int(idx[-1]) + 1
        else:
            proposed += batch
        out_slots[got:got + take] = slots[idx]
        out_xs[got:got + take] = xs[idx]
        out_labels[got:got + take] = labels[idx]
        got += take
    return ExtendedDraws(
        slots=out_slots,
        xs=out_xs,
        labels=out_labels,
        acceptance_rate=n_draws / proposed if proposed else 0.0,
        envelope=envelope,
    )
