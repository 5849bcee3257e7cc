"""Estimate normalizing constants by importance sampling over a pool of
proposal densities selected at random.

The package provides the one-shot estimators (balance heuristic, its
Rao-Blackwellized form, joint-proposal auxiliary-policy estimators, optimal
per-label combinations and a generalized family with positional surrogates),
annealed versions of each built on an extended-space construction, the
independent oracles used to test them, and a benchmark CLI that writes
delimited results.
"""

from zmix.annealing import (
    AnnealingSchedule,
    KernelConfig,
    KernelDivergenceError,
    TemperedTarget,
    ais_gf_modified,
    ais_modified,
    ais_standard,
    linear_schedule,
    mh_kernel,
)
from zmix.bench import (
    ExperimentConfig,
    GaussianGridFamily,
    OrderedInsertProposal,
    make_ordered_insert_example,
    make_running_example,
    run_experiment,
)
from zmix.combination import (
    BetaPolicy,
    GfConfig,
    TauVector,
    WeightSimplex,
    beta_opt,
    gf1_config,
    gf2_config,
    optimal_weights,
    sigma_inverse_action,
    tau_hat,
    uniform_policy,
    z_beta,
    z_comb,
    z_gf,
)
from zmix.core import (
    AbsoluteContinuityError,
    CountsView,
    JointProposal,
    LabeledSample,
    RngStream,
    TractableProposalFamily,
    UnnormalizedTarget,
    adapt_tractable_as_joint,
    counts_from_labels,
    counts_from_sample,
    draw_labeled_sample,
    k_eff,
)
from zmix.estimators import EstimateReport, WeightFunctionSet, bh_weights, z_bh, z_mis, z_rb

__all__ = [
    "AbsoluteContinuityError",
    "AnnealingSchedule",
    "BetaPolicy",
    "CountsView",
    "EstimateReport",
    "ExperimentConfig",
    "GaussianGridFamily",
    "GfConfig",
    "JointProposal",
    "KernelConfig",
    "KernelDivergenceError",
    "LabeledSample",
    "OrderedInsertProposal",
    "RngStream",
    "TauVector",
    "TemperedTarget",
    "TractableProposalFamily",
    "UnnormalizedTarget",
    "WeightFunctionSet",
    "WeightSimplex",
    "adapt_tractable_as_joint",
    "ais_gf_modified",
    "ais_modified",
    "ais_standard",
    "beta_opt",
    "bh_weights",
    "counts_from_labels",
    "counts_from_sample",
    "draw_labeled_sample",
    "gf1_config",
    "gf2_config",
    "k_eff",
    "linear_schedule",
    "make_ordered_insert_example",
    "make_running_example",
    "mh_kernel",
    "optimal_weights",
    "run_experiment",
    "sigma_inverse_action",
    "tau_hat",
    "uniform_policy",
    "z_beta",
    "z_bh",
    "z_comb",
    "z_gf",
    "z_mis",
    "z_rb",
]

__version__ = "0.1.0"
