"""Benchmark instances and the experiment runner.

The tractable workhorse is a standard-normal target paired with a family of
``K`` Gaussian components of variance 2 whose means sit on a uniform grid,
labels drawn from a shifted beta-binomial.  Its normalizing constant is 1 by
construction, so every estimator's output is directly interpretable.  A
second, order-statistics based joint proposal exercises the joint-only code
paths where per-component densities are never touched.
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
import time
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import IO

import numpy as np
from scipy.special import betaln, gammaln

from zmix.annealing import (
    KernelConfig,
    ais_gf_modified,
    ais_modified,
    ais_standard,
)
from zmix.combination import (
    beta_opt,
    gf1_config,
    gf2_config,
    uniform_policy,
    z_beta,
    z_comb,
    z_gf,
)
from zmix.core import (
    JointProposal,
    RngStream,
    TractableProposalFamily,
    UnnormalizedTarget,
    adapt_tractable_as_joint,
    as_point_batch,
    counts_from_labels,
    draw_labeled_sample,
    logsumexp,
)
from zmix.estimators import EstimateReport, z_bh, z_rb

__all__ = [
    "CSV_HEADER",
    "ESTIMATOR_NAMES",
    "ExperimentConfig",
    "GaussianGridFamily",
    "OrderedInsertProposal",
    "betabinom_label_pmf",
    "betabinom_label_log_pmf",
    "make_ordered_insert_example",
    "make_running_example",
    "ordered_insert_sample",
    "run_experiment",
    "std_normal_target",
]

_LOG_2PI = math.log(2.0 * math.pi)
_COMPONENT_VAR = 2.0
_LOG_COMPONENT_NORM = -0.5 * math.log(2.0 * math.pi * _COMPONENT_VAR)


def _validate_label_params(K: int, m: float, s: float) -> None:
    if not (isinstance(K, (int, np.integer)) and K >= 1):
        raise ValueError("K must be a positive integer")
    if not 0.0 < m < 1.0:
        raise ValueError("m must lie strictly between 0 and 1")
    if not (s == math.inf or s > 0.0):
        raise ValueError("s must be positive or inf")


def betabinom_label_log_pmf(K: int, m: float, s: float, labels) -> np.ndarray:
    """Log pmf of ``L = 1 + B`` with ``B ~ BetaBinomial(K - 1, s*m, s*(1-m))``.

    ``s = inf`` degenerates to ``B ~ Binomial(K - 1, m)``; ``(m, s) = (1/2, 2)``
    makes ``L`` uniform on ``1..K``.  The +1 shift keeps the support exactly
    ``1..K`` for every parameter choice.
    """
    _validate_label_params(K, m, s)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > K):
        raise ValueError(f"labels must lie in 1..{K}")
    b = labels.astype(float) - 1.0
    n = float(K - 1)
    log_choose = gammaln(n + 1.0) - gammaln(b + 1.0) - gammaln(n - b + 1.0)
    if s == math.inf:
        return log_choose + b * math.log(m) + (n - b) * math.log1p(-m)
    a1, a2 = s * m, s * (1.0 - m)
    return log_choose + betaln(b + a1, n - b + a2) - betaln(a1, a2)


def betabinom_label_pmf(K: int, m: float, s: float, labels) -> np.ndarray:
    """Linear-space counterpart of :func:`betabinom_label_log_pmf`."""
    return np.exp(betabinom_label_log_pmf(K, m, s, labels))


@dataclass(eq=False)
class GaussianGridFamily(TractableProposalFamily):
    """Gaussian components of variance 2 on a uniform grid of means.

    Component ``l`` has mean ``mu_min + (mu_max - mu_min) * (l - 1) / (K - 1)``
    (midpoint when K = 1); labels follow the shifted beta-binomial law.
    Treated as immutable after construction.
    """

    K: int
    m: float
    s: float
    mu_min: float = -5.0
    mu_max: float = 5.0

    dim = 1

    def __post_init__(self) -> None:
        _validate_label_params(self.K, self.m, self.s)
        if not self.mu_max >= self.mu_min:
            raise ValueError("mu_max must be >= mu_min")

    @cached_property
    def mus(self) -> np.ndarray:
        if self.K == 1:
            return np.array([0.5 * (self.mu_min + self.mu_max)])
        step = (self.mu_max - self.mu_min) / (self.K - 1)
        return self.mu_min + step * np.arange(self.K)

    @cached_property
    def _log_alpha(self) -> np.ndarray:
        return betabinom_label_log_pmf(self.K, self.m, self.s, np.arange(1, self.K + 1))

    # ---- primitives -------------------------------------------------------

    def log_component_density(self, label: int, xs: np.ndarray) -> np.ndarray:
        self._check_labels(np.asarray([label]))
        x = as_point_batch(xs, 1)[:, 0]
        return -0.25 * (x - self.mus[label - 1]) ** 2 + _LOG_COMPONENT_NORM

    def sample_component(self, label: int, rng: np.random.Generator, size: int) -> np.ndarray:
        self._check_labels(np.asarray([label]))
        draw = self.mus[label - 1] + math.sqrt(_COMPONENT_VAR) * rng.standard_normal(size)
        return draw[:, None]

    def label_log_pmf(self, labels) -> np.ndarray:
        labels = self._check_labels(np.asarray(labels))
        return self._log_alpha[labels - 1]

    def sample_labels(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.K == 1:
            return np.ones(size, dtype=np.int64)
        if self.s == math.inf:
            b = rng.binomial(self.K - 1, self.m, size=size)
        else:
            p = rng.beta(self.s * self.m, self.s * (1.0 - self.m), size=size)
            b = rng.binomial(self.K - 1, p)
        return (1 + b).astype(np.int64)

    # ---- vectorized overrides ---------------------------------------------

    def log_component_density_matrix(self, labels: np.ndarray, xs: np.ndarray) -> np.ndarray:
        labels = self._check_labels(np.asarray(labels))
        x = as_point_batch(xs, 1)[:, 0]
        diff = x[:, None] - self.mus[labels - 1][None, :]
        return -0.25 * diff * diff + _LOG_COMPONENT_NORM

    def log_pairwise_density(self, xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        labels = self._check_labels(np.asarray(labels))
        x = as_point_batch(xs, 1)[:, 0]
        diff = x - self.mus[labels - 1]
        return -0.25 * diff * diff + _LOG_COMPONENT_NORM

    def sample_points(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        labels = self._check_labels(np.asarray(labels))
        draw = self.mus[labels - 1] + math.sqrt(_COMPONENT_VAR) * rng.standard_normal(labels.size)
        return draw[:, None]

    def log_mixture_density(self, xs: np.ndarray, chunk_entries: int = 20_000_000) -> np.ndarray:
        """Full-mixture log density, chunked so K in the millions stays in RAM."""
        x = as_point_batch(xs, 1)[:, 0]
        rows = max(1, chunk_entries // max(self.K, 1))
        out = np.empty(x.size)
        for start in range(0, x.size, rows):
            xb = x[start:start + rows]
            diff = xb[:, None] - self.mus[None, :]
            mat = -0.25 * diff * diff + _LOG_COMPONENT_NORM + self._log_alpha[None, :]
            out[start:start + rows] = logsumexp(mat, axis=1)
        return out


def std_normal_target() -> UnnormalizedTarget:
    """Standard normal density, already normalized, so the true constant is 1."""
    def log_density(xs: np.ndarray) -> np.ndarray:
        x = xs[:, 0]
        return -0.5 * x * x - 0.5 * _LOG_2PI
    return UnnormalizedTarget(dim=1, log_unnorm_density=log_density)


def make_running_example(
    K: int, m: float, s: float, mu_min: float = -5.0, mu_max: float = 5.0
) -> tuple[UnnormalizedTarget, GaussianGridFamily]:
    """Standard-normal target plus the Gaussian grid family (true constant 1)."""
    return std_normal_target(), GaussianGridFamily(K=K, m=m, s=s, mu_min=mu_min, mu_max=mu_max)


class OrderedInsertProposal(JointProposal):
    """Joint proposal over sorted samples built by inserting one fresh draw.

    Sampling: take ``base_size`` iid standard normals, sort them, draw one
    more, and report the merged ascending vector together with the 1-based
    rank the fresh draw landed at.  The joint density of the pair factorizes
    as (ordered base density at the remaining coordinates) x (standard normal
    at the inserted coordinate).  Labels are informative about construction
    order, not about the density value.
    """

    def __init__(self, base_size: int):
        if base_size < 1:
            raise ValueError("base_size must be positive")
        self.base_size = int(base_size)
        self.dim = self.base_size + 1
        self.K = self.base_size + 1
        self._log_base_factorial = float(gammaln(self.base_size + 1.0))

    def sample_joint(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        base = np.sort(rng.standard_normal((size, self.base_size)), axis=1)
        fresh = rng.standard_normal(size)
        labels = 1 + (base < fresh[:, None]).sum(axis=1).astype(np.int64)
        xs = np.empty((size, self.dim))
        for rank in np.unique(labels):
            idx = np.flatnonzero(labels == rank)
            xs[idx] = np.insert(base[idx], rank - 1, fresh[idx], axis=1)
        return xs, labels

    def log_joint_density(self, xs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        pts = as_point_batch(xs, self.dim)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (pts.shape[0],):
            raise ValueError("labels must align with xs")
        if labels.size and (labels.min() < 1 or labels.max() > self.K):
            raise ValueError(f"labels must lie in 1..{self.K}")
        ascending = np.all(np.diff(pts, axis=1) > 0.0, axis=1)
        log_gauss = (-0.5 * pts * pts - 0.5 * _LOG_2PI).sum(axis=1)
        out = np.where(ascending, self._log_base_factorial + log_gauss, -np.inf)
        return out


def make_ordered_insert_example(base_size: int) -> tuple[UnnormalizedTarget, OrderedInsertProposal]:
    """Ascending-region product-normal target with the ordered-insert proposal.

    The target is the plain product of standard normals restricted to the
    strictly ascending wedge, left unnormalized, so the true constant is
    ``1 / (base_size + 1)!`` and is checkable by nested quadrature.
    """
    dim = base_size + 1

    def log_density(xs: np.ndarray) -> np.ndarray:
        ascending = np.all(np.diff(xs, axis=1) > 0.0, axis=1)
        log_gauss = (-0.5 * xs * xs - 0.5 * _LOG_2PI).sum(axis=1)
        return np.where(ascending, log_gauss, -np.inf)

    return UnnormalizedTarget(dim=dim, log_unnorm_density=log_density), OrderedInsertProposal(base_size)


def ordered_insert_sample(n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One merged ascending vector and the 1-based rank of the fresh draw."""
    xs, labels = OrderedInsertProposal(n).sample_joint(rng, 1)
    return xs[0], int(labels[0])


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

CSV_HEADER = (
    "experiment_id,replicate,seed,estimator,N_used,K,m,s,T,scheme,kernel,"
    "z_hat,log_z_hat,k_eff,cost_units,wall_ns,status"
)

#: Canonical estimator order; the position doubles as the RNG substream index
#: of the estimator within a replicate, so enabling or disabling one entry
#: never changes another entry's rows.
ESTIMATOR_NAMES = (
    "z_bh",
    "z_rb",
    "z_beta_uniform",
    "z_beta_opt",
    "z_comb",
    "z_gf1",
    "z_gf2",
    "ais_standard",
    "ais_modified",
    "ais_gf2_modified",
)

#: Estimators that run without per-component density access and are therefore
#: the only ones valid on joint-only proposals.
_JOINT_ONLY_SAFE = frozenset(
    ["z_beta_uniform", "z_beta_opt", "z_comb", "z_gf1", "z_gf2", "ais_gf2_modified"]
)

#: Estimators whose sample size is shrunk by cost matching.
_COST_MATCHED = frozenset(["z_rb", "z_beta_opt"])

_ANNEALED = frozenset(["ais_standard", "ais_modified", "ais_gf2_modified"])

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully determined description of one benchmark run.

    ``proposal`` selects the instance: ``gaussian_grid`` pairs the grid
    family with the standard-normal target (constant 1), ``ordered_insert``
    pairs the insertion proposal with the ascending product-normal target
    (constant ``1/(base_size+1)!``).  Every random quantity derives from
    ``seed``; rerunning a config reproduces its rows byte for byte.
    """

    experiment_id: str
    seed: int
    n_points: int
    replicates: int
    estimators: tuple[str, ...] = ("z_bh", "z_rb")
    proposal: str = "gaussian_grid"
    K: int = 3
    m: float = 0.5
    s: float = 2.0
    mu_min: float = -5.0
    mu_max: float = 5.0
    base_size: int = 4
    T: int = 21
    scheme: str = "purely_geometric"
    kernel: str = "mh_random_walk"
    mh_steps: int = 10
    mh_step_std: float = 1.0
    cost_matching: bool = True
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        if not self.experiment_id:
            raise ValueError("experiment_id must be nonempty")
        if self.n_points < 1 or self.replicates < 1 or self.T < 1:
            raise ValueError("n_points, replicates and T must be positive")
        if self.proposal not in ("gaussian_grid", "ordered_insert"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        unknown = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if unknown:
            raise ValueError(f"unknown estimators: {', '.join(unknown)}")
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        if self.proposal == "ordered_insert":
            bad = [e for e in self.estimators if e not in _JOINT_ONLY_SAFE]
            if bad:
                raise ValueError(
                    "estimators needing per-component densities cannot run on "
                    f"a joint-only proposal: {', '.join(bad)}"
                )
        if self.proposal == "gaussian_grid":
            if self.K < 1:
                raise ValueError("K must be positive")
            if not 0.0 < self.m < 1.0:
                raise ValueError("m must lie strictly between 0 and 1")
            if not (self.s > 0.0 or self.s == math.inf):
                raise ValueError("s must be positive or inf")
            if not self.mu_min <= self.mu_max:
                raise ValueError("mu_min must not exceed mu_max")
        else:
            if self.base_size < 1:
                raise ValueError("base_size must be positive")
        if self.scheme not in ("purely_geometric", "semi_geometric"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.kernel not in ("mh_random_walk", "collapsed_gibbs"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.mh_steps < 1:
            raise ValueError("mh_steps must be positive")
        if not self.mh_step_std > 0.0:
            raise ValueError("mh_step_std must be positive")


@lru_cache(maxsize=8)
def _instance(config: ExperimentConfig):
    """(target, family-or-None, joint) for a config; cached per process."""
    if config.proposal == "gaussian_grid":
        target, family = make_running_example(
            config.K, config.m, config.s, config.mu_min, config.mu_max
        )
        return target, family, adapt_tractable_as_joint(family)
    target, joint = make_ordered_insert_example(config.base_size)
    return target, None, joint


def _fmt(value: float) -> str:
    return "%.17g" % float(value)


def _mh_kernel_config(config: ExperimentConfig) -> KernelConfig:
    return KernelConfig(
        kind="mh_random_walk", mh_steps=config.mh_steps, mh_step_std=config.mh_step_std
    )


def _run_estimator(
    name: str,
    config: ExperimentConfig,
    n_used: int,
    stream: RngStream,
) -> EstimateReport:
    target, family, joint = _instance(config)
    if name in ("z_bh", "z_rb"):
        sample = draw_labeled_sample(family, n_used, stream.generator())
        return (z_bh if name == "z_bh" else z_rb)(sample, target, family)
    if name in ("z_beta_uniform", "z_beta_opt", "z_comb", "z_gf1", "z_gf2"):
        sample = joint.draw_sample(n_used, stream.generator())
        if name == "z_beta_uniform":
            return z_beta(sample, target, joint, uniform_policy(joint.K))
        if name == "z_beta_opt":
            return z_beta(sample, target, joint, beta_opt(joint))
        if name == "z_comb":
            return z_comb(sample, target, joint)
        counts = counts_from_labels(sample.labels)
        if name == "z_gf1":
            cfg = gf1_config(counts, joint.K, sample.n)
        else:
            cfg = gf2_config(sample, joint, counts, joint.K, sample.n)
        return z_gf(sample, target, joint, cfg)
    if name == "ais_standard":
        kernel = KernelConfig(
            kind=config.kernel, mh_steps=config.mh_steps, mh_step_std=config.mh_step_std
        )
        return ais_standard(
            n_used, config.T, config.scheme, kernel, family, target, stream
        )
    if name == "ais_modified":
        return ais_modified(
            n_used,
            config.T,
            config.scheme,
            _mh_kernel_config(config),
            family,
            target,
            stream,
        )
    if name == "ais_gf2_modified":
        def builder(smp):
            return gf2_config(
                smp, joint, counts_from_labels(smp.labels), joint.K, smp.n
            )

        return ais_gf_modified(
            n_used, config.T, builder, joint, _mh_kernel_config(config), target, stream
        )
    raise ValueError(f"unknown estimator {name!r}")


def _replicate_rows(config: ExperimentConfig, rep: int) -> list[list[str]]:
    """All CSV rows of one replicate, in canonical estimator order."""
    target, family, joint = _instance(config)
    rep_stream = RngStream(seed=config.seed, address=(rep,))
    k = config.K if family is not None else joint.K

    matched_n: int | None = None
    if (
        config.cost_matching
        and family is not None
        and any(e in _COST_MATCHED for e in config.estimators)
    ):
        # The reference labels replay z_bh's draw stream (labels come first),
        # so the matched size is right even when z_bh itself is disabled.
        ref_labels = family.sample_labels(
            rep_stream.substream(0).generator(), config.n_points
        )
        ref_keff = len(np.unique(ref_labels))
        matched_n = max(1, round(config.n_points * ref_keff / k))

    rows: list[list[str]] = []
    for idx, name in enumerate(ESTIMATOR_NAMES):
        if name not in config.estimators:
            continue
        n_used = matched_n if (matched_n is not None and name in _COST_MATCHED) else config.n_points
        begin = time.perf_counter_ns() if config.record_wall_time else 0
        try:
            report = _run_estimator(name, config, n_used, rep_stream.substream(idx))
        except Exception as exc:  # noqa: BLE001 - a failing estimator must not kill the batch
            status = f"error:{type(exc).__name__}"
            numeric = ["", "", "", ""]
            wall = time.perf_counter_ns() - begin if config.record_wall_time else 0
        else:
            status = "ok"
            numeric = [
                _fmt(report.z_hat),
                _fmt(report.log_z_hat),
                str(report.k_eff),
                str(report.cost_units),
            ]
            wall = time.perf_counter_ns() - begin if config.record_wall_time else 0
        if config.proposal == "gaussian_grid":
            m_field, s_field = _fmt(config.m), _fmt(config.s)
        else:
            m_field, s_field = "", ""
        if name in _ANNEALED:
            t_field = str(config.T)
            scheme_field = "gf_semi_geometric" if name == "ais_gf2_modified" else config.scheme
            kernel_field = config.kernel if name == "ais_standard" else "mh_random_walk"
        else:
            t_field, scheme_field, kernel_field = "", "", ""
        rows.append(
            [
                config.experiment_id,
                str(rep),
                str(config.seed),
                name,
                str(n_used),
                str(k),
                m_field,
                s_field,
                t_field,
                scheme_field,
                kernel_field,
                *numeric,
                str(wall),
                status,
            ]
        )
    return rows


def run_experiment(
    config: ExperimentConfig, sink: IO[str], workers: int = 1
) -> list[list[str]]:
    """Run every (replicate, estimator) cell and stream CSV rows to ``sink``.

    Replicates are independent and may run in parallel; rows are emitted in
    (replicate, canonical estimator) order regardless of ``workers``, so the
    output is byte-identical across worker counts.  Returns the data rows.
    """
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    all_rows: list[list[str]] = []
    if workers > 1 and config.replicates > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(
                _replicate_rows,
                [config] * config.replicates,
                range(config.replicates),
                chunksize=max(1, config.replicates // (4 * workers)),
            ):
                all_rows.extend(rows)
    else:
        for rep in range(config.replicates):
            all_rows.extend(_replicate_rows(config, rep))
    writer.writerows(all_rows)
    return all_rows
