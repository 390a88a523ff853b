"""Metropolis-within-Gibbs sampler over pattern assignments and global
parameters.

One iteration is: (1) exact categorical refresh of every gene's pattern
assignment given the global parameters, (2) conjugate Dirichlet refresh
of the mixture weights given assignment counts, (3) one log-scale
random-walk Metropolis step for each state shape, the prior shape and
the prior mean scale.  Step sizes adapt toward a target acceptance rate
during burn-in only, leaving the post-burn-in kernel fixed.

Every random draw comes from a counter-based stream keyed by
(master_seed, chain, purpose, iteration[, parameter]), so results are
bit-identical for a given configuration no matter how chains are
scheduled across workers.
"""

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError
from .hypspace import enumerate_hypotheses
from .model import (
    DEFAULT_MC_SAMPLES,
    CollapsedEvaluator,
    GlobalParams,
    PriorConfig,
)

# purposes of the per-(seed, chain, ...) random streams
_INIT, _ZSWEEP, _WEIGHTS, _MH, _ORDER = range(5)


def substream(master_seed, *path):
    """Independent generator for one (chain, purpose, iteration, ...) slot."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=tuple(path)))
    )


def order_key_for_chain(master_seed, chain_index):
    """Seed material for a chain's fixed order-probability uniforms."""
    return np.random.SeedSequence(master_seed, spawn_key=(chain_index, _ORDER))


def param_names(num_states):
    """Metropolis-updated parameter names, in sweep order."""
    return tuple(f"alpha_{i}" for i in range(1, num_states + 1)) + (
        "alpha_0",
        "mu_0",
    )


@dataclass
class SamplerConfig:
    """Run-length, prior, and reproducibility settings for one fit."""

    num_chains: int = 3
    num_iterations: int = 20_000
    burn_in: int = 5_000
    thinning: int = 1
    d_factor_samples: int = DEFAULT_MC_SAMPLES
    master_seed: int = 0
    prior: PriorConfig = field(default_factory=PriorConfig)
    adapt_until: int = None
    initial_step: float = 0.25
    target_accept: float = 0.44

    def __post_init__(self):
        if self.num_chains < 1:
            raise ValidationError("num_chains must be >= 1")
        if self.num_iterations < 1:
            raise ValidationError("num_iterations must be >= 1")
        if not 0 <= self.burn_in < self.num_iterations:
            raise ValidationError("burn_in must satisfy 0 <= burn_in < num_iterations")
        if self.thinning < 1:
            raise ValidationError("thinning must be >= 1")
        if self.d_factor_samples < 1:
            raise ValidationError("d_factor_samples must be >= 1")
        if int(self.master_seed) < 0:
            raise ValidationError("master_seed must be a nonnegative integer")
        self.master_seed = int(self.master_seed)
        if self.adapt_until is None:
            self.adapt_until = self.burn_in
        if self.adapt_until > self.num_iterations:
            raise ValidationError("adapt_until cannot exceed num_iterations")
        if not 0 < self.initial_step:
            raise ValidationError("initial_step must be positive")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must be in (0, 1)")

    @property
    def num_retained(self):
        return (self.num_iterations - self.burn_in + self.thinning - 1) // self.thinning


@dataclass
class ChainState:
    """Mutable state of one chain: parameters, assignments, step sizes."""

    params: GlobalParams
    assignments: np.ndarray
    step_sizes: np.ndarray
    iteration: int = 0
    chain_index: int = 0

    def param_value(self, name):
        names = param_names(self.params.num_states)
        if name not in names:
            raise ValidationError(f"unknown parameter {name!r}")
        idx = names.index(name)
        if idx < self.params.num_states:
            return float(self.params.state_shapes[idx])
        return float(
            self.params.prior_shape if name == "alpha_0" else self.params.prior_mean_scale
        )

    def set_param_value(self, name, value):
        names = param_names(self.params.num_states)
        idx = names.index(name)
        if idx < self.params.num_states:
            shapes = self.params.state_shapes.copy()
            shapes[idx] = value
            self.params = replace(self.params, state_shapes=shapes)
        elif name == "alpha_0":
            self.params = replace(self.params, prior_shape=value)
        else:
            self.params = replace(self.params, prior_mean_scale=value)


@dataclass
class TraceSet:
    """Retained draws and bookkeeping for one chain.

    alpha is (R, S); alpha0, mu0 are (R,); phi is (R, H).  visit_counts
    is (G, H) over retained iterations only, so each row sums to R.
    accept_rates has one entry per Metropolis move, measured after
    burn-in.
    """

    chain_index: int
    names: tuple
    alpha: np.ndarray
    alpha0: np.ndarray
    mu0: np.ndarray
    phi: np.ndarray
    visit_counts: np.ndarray
    accept_rates: np.ndarray
    burn_in: int
    thinning: int

    @property
    def num_retained(self):
        return self.alpha.shape[0]

    @property
    def num_genes(self):
        return self.visit_counts.shape[0]

    @property
    def num_hypotheses(self):
        return self.visit_counts.shape[1]

    def param_draws(self, name):
        """(R,) draws of one named global parameter."""
        if name == "alpha_0":
            return self.alpha0
        if name == "mu_0":
            return self.mu0
        if name in self.names:
            return self.alpha[:, self.names.index(name)]
        raise ValidationError(f"unknown parameter {name!r}")


@dataclass(frozen=True)
class ConvergenceReport:
    """Split-chain potential scale reduction per global parameter.

    Unavailable (rhat None, converged None) with fewer than two chains
    or fewer than four retained draws; run_fit surfaces that explicitly
    rather than silently passing.
    """

    available: bool
    rhat: dict
    converged: bool
    threshold: float
    num_chains: int
    num_retained: int

    def worst(self):
        if not self.available or not self.rhat:
            return None
        return max(self.rhat.values())


def _log_dirichlet_draw(concentration, rng):
    """Log of a Dirichlet draw, stable for tiny concentrations.

    Uses X ~ Gamma(a) represented as Gamma(a+1) * U^(1/a); the log form
    never underflows, which matters because near-zero weights (a ~ 1e-3)
    would otherwise round to exact zeros about half the time.
    """
    conc = np.asarray(concentration, dtype=float)
    y = rng.gamma(conc + 1.0)
    u = rng.random(conc.size)
    with np.errstate(divide="ignore"):
        log_x = np.log(y) + np.log(u) / conc
    return log_x - logsumexp(log_x)


def sample_mixture_weights(counts, dirichlet_weight, rng):
    """One draw of mixture weights given assignment counts.

    The conditional is Dirichlet(dirichlet_weight + counts).  Returns a
    vector on the simplex (renormalized after exponentiation).
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size < 1 or np.any(counts < 0):
        raise ValidationError("counts must be a nonnegative 1-D vector")
    if not dirichlet_weight > 0:
        raise ValidationError("dirichlet_weight must be positive")
    phi = np.exp(_log_dirichlet_draw(counts + dirichlet_weight, rng))
    return phi / phi.sum()


def _categorical_rows(log_posterior, uniforms):
    """One categorical draw per row of unnormalized log probabilities."""
    peak = log_posterior.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise NumericalError("assignment conditional vanished for some gene")
    p = np.exp(log_posterior - peak)
    cum = np.cumsum(p, axis=1)
    r = uniforms * cum[:, -1]
    z = (cum < r[:, None]).sum(axis=1)
    return np.minimum(z, log_posterior.shape[1] - 1)


def sample_assignment(gene_values, params, rng, hypotheses=None,
                      mc_samples=DEFAULT_MC_SAMPLES, order_key=0):
    """Exact conditional draw of one gene's pattern index.

    params.mixture_weights must be set; the conditional is proportional
    to phi_h times the collapsed likelihood.
    """
    gene_values = np.asarray(gene_values, dtype=float)
    if gene_values.ndim != 2:
        raise ValidationError("gene_values must be (states, individuals)")
    if params.mixture_weights is None:
        raise ValidationError("params.mixture_weights must be set")
    if hypotheses is None:
        hypotheses = enumerate_hypotheses(gene_values.shape[0])
    ev = CollapsedEvaluator(hypotheses, gene_values.shape[1], mc_samples, order_key)
    from .model import GeneStats

    stats = GeneStats(gene_values.sum(axis=1)[None, :],
                      np.log(gene_values).sum(axis=1)[None, :],
                      gene_values.shape[1])
    with np.errstate(divide="ignore"):
        log_post = ev.loglik_matrix(stats, params) + np.log(params.mixture_weights)
    return int(_categorical_rows(log_post, np.array([rng.random()]))[0])


def mh_update_global(param_id, state, dataset, rng, *, prior=None,
                     evaluator=None, gv_cache=None, log_target=None):
    """One log-scale random-walk Metropolis step for a named parameter.

    The proposal multiplies the current value by exp(sigma * eps); the
    acceptance ratio carries the Jacobian w/v of the log-scale walk.
    Proposals at or above the uniform prior's upper bound are rejected.
    When log_target is given it replaces the model's log target (used to
    validate the kernel against known densities); otherwise the target
    is the summed collapsed likelihood at the current assignments (the
    flat priors contribute nothing inside the support).

    Returns (new_value, accepted) and updates state in place.
    """
    prior = prior or PriorConfig()
    names = param_names(state.params.num_states)
    if param_id not in names:
        raise ValidationError(f"unknown parameter {param_id!r}")
    sigma = float(state.step_sizes[names.index(param_id)])
    v = state.param_value(param_id)
    eps = rng.standard_normal()
    u = rng.random()
    w = v * math.exp(sigma * eps)
    if not 0.0 < w < prior.uniform_upper:
        return v, False

    if log_target is not None:
        f_cur = log_target(v)
        f_prop = log_target(w)
    else:
        if evaluator is None:
            evaluator = CollapsedEvaluator(
                enumerate_hypotheses(dataset.num_states), dataset.num_individuals
            )
        stats = evaluator.stats(dataset)
        f_cur = float(evaluator.loglik_assigned(
            stats, state.params, state.assignments, gv_cache).sum())
        trial = ChainState(state.params, state.assignments, state.step_sizes)
        trial.set_param_value(param_id, w)
        f_prop = float(evaluator.loglik_assigned(
            stats, trial.params, state.assignments, gv_cache).sum())

    log_ratio = f_prop - f_cur + math.log(w) - math.log(v)
    if math.log(u) < log_ratio:
        state.set_param_value(param_id, w)
        return w, True
    return v, False


def initial_state(dataset, config, chain_index, num_hypotheses):
    """Deterministic starting point for one chain.

    State shapes start at the per-gene method-of-moments estimate
    (mean^2 over variance within each gene and state), summarized by the
    median across genes; the prior mean scale starts at the grand mean;
    the prior shape starts at 2.  Assignments start at the null pattern
    and step sizes at the configured initial value.
    """
    values = dataset.values
    upper = config.prior.uniform_upper
    if dataset.num_individuals >= 2:
        m = values.mean(axis=2)
        s2 = values.var(axis=2, ddof=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            per_gene = np.where(s2 > 0, m * m / s2, np.nan)
        with warnings.catch_warnings():
            # a state whose every gene has zero variance is a valid corner
            warnings.simplefilter("ignore", RuntimeWarning)
            alpha = np.nanmedian(per_gene, axis=0)
        alpha = np.where(np.isfinite(alpha), alpha, 1.0)
    else:
        alpha = np.ones(dataset.num_states)
    alpha = np.clip(alpha, 1e-3, 0.99 * upper)
    mu0 = float(np.clip(values.mean(), 1e-6, 0.99 * upper))
    a0 = min(2.0, 0.5 * upper)
    phi = np.full(num_hypotheses, 1.0 / num_hypotheses)
    params = GlobalParams(alpha, a0, mu0, phi)
    steps = np.full(dataset.num_states + 2, config.initial_step)
    z = np.zeros(dataset.num_genes, dtype=np.int64)
    return ChainState(params, z, steps, iteration=0, chain_index=chain_index)


def run_chain(dataset, config, chain_index, hypotheses=None):
    """Run one chain and return its TraceSet."""
    if hypotheses is None:
        hypotheses = enumerate_hypotheses(dataset.num_states)
    H = len(hypotheses)
    G = dataset.num_genes
    S = dataset.num_states
    names = param_names(S)
    seed = config.master_seed
    omega = config.prior.dirichlet_weight
    upper = config.prior.uniform_upper

    evaluator = CollapsedEvaluator(
        hypotheses, dataset.num_individuals, config.d_factor_samples,
        order_key_for_chain(seed, chain_index),
    )
    stats = evaluator.stats(dataset)
    state = initial_state(dataset, config, chain_index, H)
    gv_main = evaluator.make_gv_cache()
    gv_scratch = evaluator.make_gv_cache()
    log_phi = np.log(state.params.mixture_weights)

    R = config.num_retained
    alpha_draws = np.empty((R, S))
    alpha0_draws = np.empty(R)
    mu0_draws = np.empty(R)
    phi_draws = np.empty((R, H))
    visits = np.zeros((G, H), dtype=np.int64)
    accepts = np.zeros(S + 2, dtype=np.int64)
    row = 0

    for t in range(1, config.num_iterations + 1):
        state.iteration = t

        # (1) assignments, jointly exact given the current parameters
        loglik = evaluator.loglik_matrix(stats, state.params, gv_main)
        u = substream(seed, chain_index, _ZSWEEP, t).random(G)
        z = _categorical_rows(loglik + log_phi[None, :], u)
        state.assignments = z

        # (2) mixture weights
        counts = np.bincount(z, minlength=H)
        log_phi = _log_dirichlet_draw(counts + omega,
                                      substream(seed, chain_index, _WEIGHTS, t))
        phi = np.exp(log_phi)
        state.params = replace(state.params, mixture_weights=phi / phi.sum())

        # (3) global parameters; the weight term is parameter-free so the
        # target is the summed collapsed likelihood at the fresh assignments
        f_cur = float(loglik[np.arange(G), z].sum())
        for pidx, name in enumerate(names):
            rng_p = substream(seed, chain_index, _MH, t, pidx)
            eps = rng_p.standard_normal()
            uu = rng_p.random()
            sigma = float(state.step_sizes[pidx])
            v = state.param_value(name)
            w = v * math.exp(sigma * eps)
            accepted = False
            if 0.0 < w < upper:
                trial = ChainState(state.params, z, state.step_sizes)
                trial.set_param_value(name, w)
                f_prop = float(evaluator.loglik_assigned(
                    stats, trial.params, z, gv_scratch).sum())
                if math.log(uu) < f_prop - f_cur + math.log(w) - math.log(v):
                    accepted = True
                    state.params = trial.params
                    f_cur = f_prop
                    gv_main, gv_scratch = gv_scratch, gv_main
            if t <= config.adapt_until:
                gain = t ** -0.6
                new_sigma = sigma * math.exp(
                    gain * ((1.0 if accepted else 0.0) - config.target_accept)
                )
                state.step_sizes[pidx] = min(max(new_sigma, 1e-3), 10.0)
            elif t > config.burn_in and accepted:
                accepts[pidx] += 1
            # acceptance is tallied only where the kernel is frozen

        if t > config.burn_in and (t - config.burn_in - 1) % config.thinning == 0:
            alpha_draws[row] = state.params.state_shapes
            alpha0_draws[row] = state.params.prior_shape
            mu0_draws[row] = state.params.prior_mean_scale
            phi_draws[row] = state.params.mixture_weights
            visits[np.arange(G), z] += 1
            row += 1

    tallied = config.num_iterations - max(config.burn_in, config.adapt_until)
    return TraceSet(
        chain_index=chain_index,
        names=names,
        alpha=alpha_draws,
        alpha0=alpha0_draws,
        mu0=mu0_draws,
        phi=phi_draws,
        visit_counts=visits,
        accept_rates=accepts / max(tallied, 1),
        burn_in=config.burn_in,
        thinning=config.thinning,
    )


def _chain_task(args):
    dataset, config, chain_index = args
    return run_chain(dataset, config, chain_index)


def run_chains(dataset, config, workers=1):
    """Run all configured chains and assess convergence.

    Chains are independent; with workers > 1 they run in separate
    processes.  Output is ordered by chain index and bit-identical for a
    given configuration regardless of the worker count.
    """
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    tasks = [(dataset, config, c) for c in range(config.num_chains)]
    if workers == 1 or config.num_chains == 1:
        traces = [_chain_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, config.num_chains)) as pool:
            traces = list(pool.map(_chain_task, tasks))
    return traces, convergence_report(traces)


def split_rhat(draws):
    """Split-chain potential scale reduction factor.

    draws is (num_chains, num_draws); each chain is split in half, and
    the usual between/within variance ratio is computed over the 2C
    half-chains.  Constant sequences give exactly 1.0.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValidationError("draws must be (chains, iterations)")
    n = draws.shape[1] // 2
    if draws.shape[0] < 1 or n < 2:
        raise ValidationError("need at least 4 draws per chain")
    halves = np.concatenate([draws[:, :n], draws[:, n: 2 * n]], axis=0)
    means = halves.mean(axis=1)
    within = halves.var(axis=1, ddof=1).mean()
    if within == 0.0:
        return 1.0
    between = n * means.var(ddof=1)
    v_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(v_hat / within))


def convergence_report(traces, threshold=1.1):
    """Split-R-hat over chains for every global parameter."""
    if not traces:
        raise ValidationError("traces must be non-empty")
    num_chains = len(traces)
    retained = traces[0].num_retained
    if num_chains < 2 or retained < 4:
        return ConvergenceReport(False, None, None, threshold,
                                 num_chains, retained)
    names = traces[0].names
    rhat = {
        name: split_rhat(np.stack([t.param_draws(name) for t in traces]))
        for name in names
    }
    worst = max(rhat.values())
    return ConvergenceReport(True, rhat, bool(worst <= threshold), threshold,
                             num_chains, retained)


def fixed_params_visit_frequencies(dataset, params, num_sweeps, master_seed=0,
                                   mc_samples=DEFAULT_MC_SAMPLES, order_key=0,
                                   hypotheses=None):
    """Assignment visit frequencies with the global parameters held fixed.

    Repeats the sampler's exact categorical scan num_sweeps times and
    returns (G, H) visit frequencies; a direct empirical check against
    the exact small-problem posterior.
    """
    if params.mixture_weights is None:
        raise ValidationError("params.mixture_weights must be set")
    if num_sweeps < 1:
        raise ValidationError("num_sweeps must be >= 1")
    if hypotheses is None:
        hypotheses = enumerate_hypotheses(dataset.num_states)
    ev = CollapsedEvaluator(hypotheses, dataset.num_individuals, mc_samples,
                            order_key)
    with np.errstate(divide="ignore"):
        log_post = ev.loglik_matrix(ev.stats(dataset), params) + np.log(
            params.mixture_weights
        )
    G, H = log_post.shape
    visits = np.zeros((G, H), dtype=np.int64)
    rows = np.arange(G)
    for t in range(1, num_sweeps + 1):
        u = substream(master_seed, 0, _ZSWEEP, t).random(G)
        visits[rows, _categorical_rows(log_post, u)] += 1
    return visits / num_sweeps
