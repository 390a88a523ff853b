"""Posterior inference of ordered equality patterns across many genes.

Expression values for one gene are grouped into states; the object of
inference is, per gene, which states share a mean and how the distinct
means are ordered.  A gamma observation layer with state-specific shapes
sits under inverse-gamma latent means, the latent means integrate out in
closed form up to an order-probability factor, and a Gibbs sampler over
per-gene pattern assignments plus global parameters yields posterior
pattern probabilities that feed direct FDR-calibrated decision rules.
"""

from .errors import NumericalError, ValidationError
from .hypspace import (
    Hypothesis,
    HypothesisGroup,
    collapse_by_predicate,
    enumerate_hypotheses,
    hypothesis_from_means,
    standard_grouping,
)
from .model import (
    CollapsedTerms,
    ExpressionDataset,
    GlobalParams,
    PriorConfig,
    collapsed_terms,
    log_collapsed_likelihood,
    log_complete_data_density,
    log_latent_prior_density,
    log_observation_density,
    order_probability_factor,
)
from .sampler import (
    ChainState,
    ConvergenceReport,
    SamplerConfig,
    TraceSet,
    mh_update_global,
    run_chain,
    run_chains,
    sample_assignment,
    sample_mixture_weights,
    split_rhat,
)
from .inference import (
    InferenceResult,
    PosteriorSummary,
    calibrate_threshold,
    collapsed_inference,
    fdr_curve,
    fdr_many_hypotheses,
    fdr_null_vs_nonnull,
    modal_hypothesis,
    summarize,
)
from .simulate import (
    CoverageReport,
    SimulationTruth,
    coverage_experiment,
    default_pattern_weights,
    exact_posterior_small,
    generate_dataset,
    reference_simulation_params,
)
from .diagnostics import (
    ClusteringResult,
    CvRankTable,
    DiscrepancyReport,
    EffectSizeReport,
    correlation_distance_matrix,
    cv_rank_table,
    discrepancy_report,
    effect_size,
    linkage_clusters,
)

__version__ = "0.1.0"
