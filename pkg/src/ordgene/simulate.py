"""Simulation and validation harness.

Datasets are drawn from the generative model itself: pattern per gene
from the mixture weights, group means as sorted inverse-gamma draws
(sorting M exchangeable draws is exactly the order-constrained prior),
then gamma observations around the per-state means.  The exact
small-problem posterior and the repeated-fit coverage experiment give
the two standing checks on the sampler.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import betainc, gammaln

from .errors import ValidationError
from .hypspace import enumerate_hypotheses
from .inference import calibrate_threshold, summarize
from .model import (
    DEFAULT_MC_SAMPLES,
    CollapsedEvaluator,
    ExpressionDataset,
    GlobalParams,
)
from .sampler import run_chains


@dataclass(frozen=True)
class SimulationTruth:
    """Ground truth behind a generated dataset."""

    params: GlobalParams
    assignments: np.ndarray
    latent_means: np.ndarray

    @property
    def nonnull_fraction(self):
        return float(np.mean(self.assignments != 0))


def default_pattern_weights(hypotheses, nonnull_fraction=0.25):
    """Mixture weights concentrated on the two paired-shift patterns.

    For four states the nonnull mass splits roughly 59/38 between the
    two patterns where {1,3} and {2,4} move as pairs, with a small
    uniform residue over every other nonnull pattern.  For other state
    counts the nonnull mass is uniform.  Weights sum to 1.
    """
    if not 0.0 <= nonnull_fraction < 1.0:
        raise ValidationError("nonnull_fraction must lie in [0, 1)")
    H = len(hypotheses)
    if H < 1 or hypotheses[0].num_groups != 1:
        raise ValidationError("hypotheses must start with the null pattern")
    w = np.zeros(H)
    w[0] = 1.0 - nonnull_fraction
    if H == 1:
        if nonnull_fraction:
            raise ValidationError("no nonnull patterns to carry weight")
        return w
    pair_up = pair_down = None
    if hypotheses[0].num_states == 4:
        for h in hypotheses:
            if h.num_groups == 2:
                if h.groups == ((1, 3), (2, 4)):
                    pair_up = h.index
                elif h.groups == ((2, 4), (1, 3)):
                    pair_down = h.index
    if pair_up is not None and pair_down is not None and H > 3:
        w[pair_up] = nonnull_fraction * 0.118 / 0.206
        w[pair_down] = nonnull_fraction * 0.078 / 0.206
        rest = [h.index for h in hypotheses
                if h.index not in (0, pair_up, pair_down)]
        w[rest] = nonnull_fraction * 0.010 / 0.206 / len(rest)
    else:
        w[1:] = nonnull_fraction / (H - 1)
    return w


def reference_simulation_params(num_states=4, nonnull_fraction=0.25):
    """Default generating parameters for simulation studies.

    State shapes 25 (coefficient of variation 0.2), prior shape 5 and
    prior mean scale 9, with the default pattern weights.
    """
    hyps = enumerate_hypotheses(num_states)
    return GlobalParams(
        state_shapes=np.full(num_states, 25.0),
        prior_shape=5.0,
        prior_mean_scale=9.0,
        mixture_weights=default_pattern_weights(hyps, nonnull_fraction),
    )


def generate_dataset(true_params, num_genes, num_individuals, rng,
                     assignments=None, hypotheses=None):
    """Draw a dataset from the generative model.

    Pattern assignments come from true_params.mixture_weights unless
    given explicitly.  Group means are sorted iid inverse-gamma draws;
    observations are gamma with the state's shape around the state mean.
    Returns (ExpressionDataset, SimulationTruth).
    """
    S = true_params.num_states
    if hypotheses is None:
        hypotheses = enumerate_hypotheses(S)
    H = len(hypotheses)
    G = int(num_genes)
    N = int(num_individuals)
    if G < 1 or N < 1:
        raise ValidationError("num_genes and num_individuals must be >= 1")
    if assignments is None:
        if true_params.mixture_weights is None:
            raise ValidationError("need mixture_weights or explicit assignments")
        if true_params.mixture_weights.size != H:
            raise ValidationError("mixture_weights length must match hypotheses")
        z = rng.choice(H, size=G, p=true_params.mixture_weights)
    else:
        z = np.asarray(assignments, dtype=np.int64)
        if z.shape != (G,) or np.any(z < 0) or np.any(z >= H):
            raise ValidationError("assignments must be (G,) indices into hypotheses")

    a0 = true_params.prior_shape
    b0 = a0 * true_params.prior_mean_scale
    # one (G, S) block of prior draws keeps the stream layout fixed
    raw = b0 / rng.gamma(a0, size=(G, S))
    means = np.empty((G, S))
    for g in range(G):
        h = hypotheses[z[g]]
        group_means = np.sort(raw[g, : h.num_groups])
        means[g] = group_means[np.asarray(h.rank_vector) - 1]

    alpha = true_params.state_shapes
    values = rng.gamma(alpha[None, :, None],
                       means[:, :, None] / alpha[None, :, None],
                       size=(G, S, N))
    dataset = ExpressionDataset(values)
    return dataset, SimulationTruth(true_params, z, means)


def exact_posterior_small(dataset, params, mc_samples=DEFAULT_MC_SAMPLES,
                          order_key=0, exact_pairs=True, hypotheses=None):
    """(G, H) exact per-gene pattern posterior at fixed global parameters.

    Intended for small validation problems (G * H capped at 100000).
    With exact_pairs (default) the two-group order probabilities use the
    closed Beta-tail form instead of Monte Carlo, so for two-state
    problems the result is exact up to quadrature-grade accuracy; larger
    group counts keep the Monte Carlo factor, shareable with a sampler
    via order_key.
    """
    if params.mixture_weights is None:
        raise ValidationError("params.mixture_weights must be set")
    if hypotheses is None:
        hypotheses = enumerate_hypotheses(dataset.num_states)
    H = len(hypotheses)
    if dataset.num_genes * H > 100_000:
        raise ValidationError("problem too large for the exact posterior")
    if params.mixture_weights.size != H:
        raise ValidationError("mixture_weights length must match hypotheses")
    ev = CollapsedEvaluator(hypotheses, dataset.num_individuals, mc_samples,
                            order_key)
    stats = ev.stats(dataset)
    A = ev.post_shapes(params)
    log_b = ev.log_post_scales(stats, params)
    per_subset = gammaln(A)[None, :] - A[None, :] * log_b
    loglik = per_subset @ ev.member_matrix.T
    a0 = params.prior_shape
    loglik += ev.num_groups[None, :] * (
        a0 * np.log(a0 * params.prior_mean_scale) - gammaln(a0)
    )
    loglik += ev.data_term(stats, params)[:, None]
    order = ev.log_order_factors(log_b, A, ev.make_gv_cache())
    if exact_pairs:
        with np.errstate(divide="ignore"):
            for h in hypotheses:
                if h.num_groups != 2:
                    continue
                lo, hi = ev.hyp_subsets[h.index]
                r = np.exp(log_b[:, hi] - log_b[:, lo])
                p = betainc(A[hi], A[lo], r / (1.0 + r))
                order[:, h.index] = np.log(2.0) + np.log(p)
    loglik += order
    with np.errstate(divide="ignore"):
        loglik += np.log(params.mixture_weights)[None, :]
    peak = loglik.max(axis=1, keepdims=True)
    p = np.exp(loglik - peak)
    return p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class CoverageReport:
    """Repeated-fit frequentist summary at known generating parameters.

    posterior_means is (replicates, parameters); covered flags whether
    each replicate's central 95% interval contained the truth; the
    nonnull fractions are the FDR-calibrated selected shares per
    replicate, next to the true assigned shares.
    """

    names: tuple
    true_values: np.ndarray
    posterior_means: np.ndarray
    covered: np.ndarray
    inferred_nonnull: np.ndarray
    true_nonnull: np.ndarray
    num_replicates: int

    @property
    def mean_posterior_means(self):
        return self.posterior_means.mean(axis=0)

    @property
    def coverage(self):
        return self.covered.mean(axis=0)

    @property
    def nonnull_mean(self):
        return float(self.inferred_nonnull.mean())

    @property
    def nonnull_sd(self):
        return float(self.inferred_nonnull.std(ddof=1)) if self.num_replicates > 1 else 0.0


def _coverage_replicate(args):
    (true_params, num_genes, num_individuals, config, target_fdr, grid_step,
     master_seed, r) = args
    gen_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(100, r)))
    )
    dataset, truth = generate_dataset(true_params, num_genes, num_individuals,
                                      gen_rng)
    chain_seed = int(
        np.random.SeedSequence(master_seed, spawn_key=(101, r)).generate_state(
            1, dtype=np.uint64
        )[0]
    )
    cfg = replace(config, master_seed=chain_seed)
    traces, _ = run_chains(dataset, cfg, workers=1)
    summary = summarize(traces, dataset.gene_ids)
    result = calibrate_threshold(summary, target_fdr, grid_step)
    names = traces[0].names
    post_means = np.array([summary.param_means[n] for n in names])
    lo = np.array([summary.param_quantiles[n][0] for n in names])
    hi = np.array([summary.param_quantiles[n][2] for n in names])
    true_vec = np.concatenate([
        true_params.state_shapes,
        [true_params.prior_shape, true_params.prior_mean_scale],
    ])
    covered = (lo <= true_vec) & (true_vec <= hi)
    inferred = result.num_selected / dataset.num_genes
    return post_means, covered, inferred, truth.nonnull_fraction


def coverage_experiment(num_replicates, num_genes, num_individuals, config,
                        true_params=None, target_fdr=0.05, grid_step=0.001,
                        workers=1, master_seed=20_000):
    """Generate, fit, and score num_replicates datasets at known truth.

    Each replicate gets its own generation stream and sampler seed
    derived from master_seed, so the experiment is reproducible and
    individual replicates can be rerun in isolation.  workers
    parallelizes over replicates.
    """
    if num_replicates < 1:
        raise ValidationError("num_replicates must be >= 1")
    if true_params is None:
        true_params = reference_simulation_params()
    if true_params.mixture_weights is None:
        raise ValidationError("true_params.mixture_weights must be set")
    tasks = [
        (true_params, num_genes, num_individuals, config, target_fdr,
         grid_step, master_seed, r)
        for r in range(num_replicates)
    ]
    if workers == 1 or num_replicates == 1:
        rows = [_coverage_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, num_replicates)) as pool:
            rows = list(pool.map(_coverage_replicate, tasks))
    post_means = np.array([r[0] for r in rows])
    covered = np.array([r[1] for r in rows])
    inferred = np.array([r[2] for r in rows])
    true_nonnull = np.array([r[3] for r in rows])
    S = true_params.num_states
    names = tuple(f"alpha_{i}" for i in range(1, S + 1)) + ("alpha_0", "mu_0")
    true_vec = np.concatenate([
        true_params.state_shapes,
        [true_params.prior_shape, true_params.prior_mean_scale],
    ])
    return CoverageReport(
        names=names,
        true_values=true_vec,
        posterior_means=post_means,
        covered=covered,
        inferred_nonnull=inferred,
        true_nonnull=true_nonnull,
        num_replicates=num_replicates,
    )
