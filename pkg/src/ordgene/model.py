"""Mathematical core: gamma observations, inverse-gamma latent means,
and the collapsed per-gene likelihood of an ordered equality pattern.

Observations for gene g, state i are Gamma with shape alpha_i and mean
mu_gi (rate alpha_i / mu_gi), so the state shape controls the squared
inverse coefficient of variation.  Latent means are inverse-gamma with
shape alpha_0 and scale alpha_0 * mu_0.  Conditional on a pattern, the
states of one group share a latent mean and the group means are
constrained to ascend; integrating the means out in closed form leaves
per-group inverse-gamma posteriors (A_m, B_m) and one non-analytic
factor, the probability that independent draws from those posteriors
respect the ordering, estimated by Monte Carlo with common random
numbers.

Parameterizations used throughout:
    Gamma(shape a, rate r):      f(x) = r^a x^(a-1) e^(-r x) / G(a)
    Inv-Gamma(shape a, scale b): f(v) = b^a v^(-a-1) e^(-b/v) / G(a)
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaincinv, gammaln

from .errors import ValidationError
from .hypspace import Hypothesis, enumerate_hypotheses

DEFAULT_MC_SAMPLES = 512
DEFAULT_ORDER_SEED = 0


def order_factor_rng(order_key=DEFAULT_ORDER_SEED):
    """Deterministic generator for order-probability uniforms.

    order_key may be an int or a numpy SeedSequence.  A counter-based
    bit generator keeps draws reproducible and cheap to re-derive.
    """
    if not isinstance(order_key, np.random.SeedSequence):
        order_key = np.random.SeedSequence(order_key)
    return np.random.Generator(np.random.Philox(order_key))


# ---------------------------------------------------------------------------
# datasets and parameters


class ExpressionDataset:
    """Strictly positive expression values, genes x states x individuals.

    Treat instances as immutable: per-state sums are cached on first use.

    Parameters
    ----------
    values : ndarray (num_genes, num_states, num_individuals)
    gene_ids : sequence of str, optional
        Defaults to g0001, g0002, ...  Must be unique, non-empty, and
        free of tabs/newlines (they key every output table).
    """

    def __init__(self, values, gene_ids=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValidationError(
                f"values must be (genes, states, individuals), got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("expression values must be finite")
        if np.any(values <= 0):
            g, i, j = np.argwhere(values <= 0)[0]
            raise ValidationError(
                f"non-positive value at gene index {g}, state {i + 1}, "
                f"individual {j + 1}"
            )
        G = values.shape[0]
        if gene_ids is None:
            width = max(4, len(str(G)))
            gene_ids = tuple(f"g{k:0{width}d}" for k in range(1, G + 1))
        else:
            gene_ids = tuple(str(g) for g in gene_ids)
            if len(gene_ids) != G:
                raise ValidationError("gene_ids length must match values")
            if len(set(gene_ids)) != G:
                raise ValidationError("gene_ids must be unique")
            for gid in gene_ids:
                if not gid or any(c in gid for c in "\t\r\n"):
                    raise ValidationError(f"bad gene id {gid!r}")
        self.values = values
        self.gene_ids = gene_ids
        self._state_sums = None
        self._state_log_sums = None

    @property
    def num_genes(self):
        return self.values.shape[0]

    @property
    def num_states(self):
        return self.values.shape[1]

    @property
    def num_individuals(self):
        return self.values.shape[2]

    def state_sums(self):
        """(G, S) sums over individuals."""
        if self._state_sums is None:
            self._state_sums = self.values.sum(axis=2)
        return self._state_sums

    def state_log_sums(self):
        """(G, S) sums of log values over individuals."""
        if self._state_log_sums is None:
            self._state_log_sums = np.log(self.values).sum(axis=2)
        return self._state_log_sums

    def column_labels(self):
        """Sample column labels s{i}_n{j}, state-major."""
        return [
            f"s{i}_n{j}"
            for i in range(1, self.num_states + 1)
            for j in range(1, self.num_individuals + 1)
        ]

    def gene_index(self, gene):
        """Row index for a gene id (or pass an int through, range-checked)."""
        if isinstance(gene, (int, np.integer)):
            if not 0 <= gene < self.num_genes:
                raise ValidationError(f"gene index {gene} out of range")
            return int(gene)
        try:
            return self.gene_ids.index(gene)
        except ValueError:
            raise ValidationError(f"unknown gene id {gene!r}") from None


@dataclass
class GlobalParams:
    """Global model parameters shared by all genes.

    state_shapes : (S,) gamma shapes alpha_i, one per state.
    prior_shape : alpha_0 of the inverse-gamma latent-mean prior.
    prior_mean_scale : mu_0; the prior scale is alpha_0 * mu_0.
    mixture_weights : optional (H,) pattern weights phi (simplex).
    """

    state_shapes: np.ndarray
    prior_shape: float
    prior_mean_scale: float
    mixture_weights: np.ndarray = None

    def __post_init__(self):
        self.state_shapes = np.asarray(self.state_shapes, dtype=float)
        if self.state_shapes.ndim != 1 or self.state_shapes.size < 1:
            raise ValidationError("state_shapes must be a 1-D vector")
        if not np.all(np.isfinite(self.state_shapes)) or np.any(self.state_shapes <= 0):
            raise ValidationError("state_shapes must be positive and finite")
        for name in ("prior_shape", "prior_mean_scale"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise ValidationError(f"{name} must be positive and finite")
            setattr(self, name, v)
        if self.mixture_weights is not None:
            w = np.asarray(self.mixture_weights, dtype=float)
            if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValidationError("mixture_weights must be nonnegative and finite")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValidationError("mixture_weights must sum to 1")
            self.mixture_weights = w

    @property
    def num_states(self):
        return self.state_shapes.size


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the fixed priors.

    dirichlet_weight : symmetric Dirichlet weight omega on the pattern
        mixture.  The small default keeps unsupported patterns near zero.
    uniform_upper : upper bound C of the flat priors on each alpha_i,
        alpha_0 and mu_0 (all uniform on (0, C)).
    """

    dirichlet_weight: float = 0.001
    uniform_upper: float = 10_000.0

    def __post_init__(self):
        if not (np.isfinite(self.dirichlet_weight) and self.dirichlet_weight > 0):
            raise ValidationError("dirichlet_weight must be positive and finite")
        if not (np.isfinite(self.uniform_upper) and self.uniform_upper > 0):
            raise ValidationError("uniform_upper must be positive and finite")


@dataclass(frozen=True)
class CollapsedTerms:
    """Per-group posterior pieces of the collapsed likelihood.

    post_shapes[m] = alpha_0 + N * sum of state shapes in group m.
    post_scales[m] = alpha_0 * mu_0 + sum over group states of
        alpha_i * (sum of that state's values).
    order_factor_log = log of M! times the probability that independent
        Inv-Gamma(post_shapes, post_scales) draws ascend.
    """

    post_shapes: np.ndarray
    post_scales: np.ndarray
    order_factor_log: float


# ---------------------------------------------------------------------------
# scalar reference densities


def log_observation_density(x, shape, mean):
    """Log density of Gamma(shape, rate=shape/mean) at x (elementwise)."""
    x = np.asarray(x, dtype=float)
    if not (np.isfinite(shape) and shape > 0 and np.isfinite(mean) and mean > 0):
        raise ValidationError("shape and mean must be positive and finite")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValidationError("x must be strictly positive and finite")
    rate = shape / mean
    out = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return out if out.ndim else float(out)


def log_latent_prior_density(mu, prior_shape, prior_mean_scale):
    """Log density of Inv-Gamma(prior_shape, scale=prior_shape*prior_mean_scale)."""
    mu = np.asarray(mu, dtype=float)
    a0 = float(prior_shape)
    if not (np.isfinite(a0) and a0 > 0):
        raise ValidationError("prior_shape must be positive and finite")
    m0 = float(prior_mean_scale)
    if not (np.isfinite(m0) and m0 > 0):
        raise ValidationError("prior_mean_scale must be positive and finite")
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        raise ValidationError("mu must be strictly positive and finite")
    b = a0 * m0
    out = a0 * np.log(b) - gammaln(a0) - (a0 + 1.0) * np.log(mu) - b / mu
    return out if out.ndim else float(out)


def _check_gene_values(gene_values, hypothesis):
    gene_values = np.asarray(gene_values, dtype=float)
    if gene_values.ndim != 2:
        raise ValidationError("gene_values must be (states, individuals)")
    if np.any(gene_values <= 0) or not np.all(np.isfinite(gene_values)):
        raise ValidationError("gene_values must be strictly positive and finite")
    if hypothesis.num_states != gene_values.shape[0]:
        raise ValidationError(
            f"hypothesis covers {hypothesis.num_states} states, "
            f"data has {gene_values.shape[0]}"
        )
    return gene_values


def _check_params(params, num_states):
    if params.num_states != num_states:
        raise ValidationError(
            f"params cover {params.num_states} states, data has {num_states}"
        )


def order_probability_factor(post_shapes, post_scales, mc_samples=DEFAULT_MC_SAMPLES,
                             rng=None):
    """Log of M! * P(V_1 < ... < V_M) for independent inverse-gamma V_m.

    Exactly 0.0 for a single group.  For M >= 2 the probability is a
    Monte Carlo average over mc_samples common-random-number draws per
    group (V_m = B_m / G_m with G_m the inverse regularized-gamma
    transform of one uniform).  A zero hit count is floored at half a
    count so the log stays finite; patterns that badly violate the
    ordering are then merely astronomically unlikely rather than
    impossible, which keeps downstream log-domain arithmetic total.
    """
    a = np.asarray(post_shapes, dtype=float)
    b = np.asarray(post_scales, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValidationError("post_shapes and post_scales must be equal-length vectors")
    if np.any(a <= 0) or np.any(b <= 0) or not (
        np.all(np.isfinite(a)) and np.all(np.isfinite(b))
    ):
        raise ValidationError("posterior shapes and scales must be positive and finite")
    M = a.size
    if M == 1:
        return 0.0
    if mc_samples < 1:
        raise ValidationError("mc_samples must be >= 1")
    if rng is None:
        rng = order_factor_rng()
    u = rng.random((M, mc_samples))
    log_v = np.log(b)[:, None] - np.log(gammaincinv(a[:, None], u))
    hits = int(np.count_nonzero(np.all(np.diff(log_v, axis=0) > 0.0, axis=0)))
    return float(gammaln(M + 1) + np.log(max(hits, 0.5)) - np.log(mc_samples))


def log_order_probability_pair(post_shapes, post_scales):
    """Exact log P(V_1 < V_2) for two independent inverse-gamma variables.

    With V_m = B_m / G_m and G_m ~ Gamma(A_m), the event V_1 < V_2 is
    G_2 / (G_1 + G_2) < r / (1 + r) with r = B_2 / B_1, a Beta(A_2, A_1)
    tail.  Used where an exact two-group order probability is required;
    the Monte Carlo estimator above remains the estimator of record for
    general M.
    """
    a = np.asarray(post_shapes, dtype=float)
    b = np.asarray(post_scales, dtype=float)
    if a.shape != (2,) or b.shape != (2,):
        raise ValidationError("exact order probability is defined for two groups")
    r = b[1] / b[0]
    p = betainc(a[1], a[0], r / (1.0 + r))
    with np.errstate(divide="ignore"):
        return float(np.log(p))


def collapsed_terms(gene_values, hypothesis, params,
                    mc_samples=DEFAULT_MC_SAMPLES, rng=None):
    """Per-group (A_m, B_m) and the order factor for one gene and pattern."""
    gene_values = _check_gene_values(gene_values, hypothesis)
    _check_params(params, gene_values.shape[0])
    N = gene_values.shape[1]
    alpha = params.state_shapes
    a0 = params.prior_shape
    b0 = a0 * params.prior_mean_scale
    state_sums = gene_values.sum(axis=1)
    A = np.array([a0 + N * sum(alpha[s - 1] for s in grp) for grp in hypothesis.groups])
    B = np.array(
        [b0 + sum(alpha[s - 1] * state_sums[s - 1] for s in grp) for grp in hypothesis.groups]
    )
    return CollapsedTerms(A, B, order_probability_factor(A, B, mc_samples, rng))


def log_collapsed_likelihood(gene_values, hypothesis, params,
                             mc_samples=DEFAULT_MC_SAMPLES, rng=None):
    """Log joint density of one gene's data and its pattern, means integrated out.

    Excludes the pattern's mixture weight.  The result is the order
    factor plus the closed-form ratio of normalizing constants:

        sum_i [ N a_i log a_i - N lg(a_i) + (a_i - 1) sum_j log x_ij ]
        + M a_0 log(a_0 mu_0) - M lg(a_0)
        + sum_m [ lg(A_m) - A_m log B_m ]
    """
    gene_values = _check_gene_values(gene_values, hypothesis)
    _check_params(params, gene_values.shape[0])
    N = gene_values.shape[1]
    alpha = params.state_shapes
    a0 = params.prior_shape
    b0 = a0 * params.prior_mean_scale
    terms = collapsed_terms(gene_values, hypothesis, params, mc_samples, rng)
    M = hypothesis.num_groups
    data = float(
        np.sum(N * (alpha * np.log(alpha) - gammaln(alpha))
               + (alpha - 1.0) * np.log(gene_values).sum(axis=1))
    )
    const = M * (a0 * np.log(b0) - gammaln(a0))
    groups = float(np.sum(gammaln(terms.post_shapes)
                          - terms.post_shapes * np.log(terms.post_scales)))
    return data + const + groups + terms.order_factor_log


def log_complete_data_density(gene_values, latent_means, hypothesis, params):
    """Log joint density of data and latent means under a pattern.

    latent_means is the (S,) per-state vector; states in the same group
    must carry exactly equal values (anything else is a structural
    error).  Group values violating the ascending order have density
    zero, returned as -inf.  Includes the M! order-statistics factor and
    excludes the pattern's mixture weight, so integrating the means out
    reproduces the collapsed likelihood.
    """
    gene_values = _check_gene_values(gene_values, hypothesis)
    _check_params(params, gene_values.shape[0])
    latent_means = np.asarray(latent_means, dtype=float)
    if latent_means.shape != (gene_values.shape[0],):
        raise ValidationError("latent_means must have one value per state")
    if np.any(latent_means <= 0) or not np.all(np.isfinite(latent_means)):
        raise ValidationError("latent_means must be strictly positive and finite")
    group_values = []
    for grp in hypothesis.groups:
        vals = {latent_means[s - 1] for s in grp}
        if len(vals) != 1:
            raise ValidationError(
                f"states {grp} share a group but carry different latent means"
            )
        group_values.append(vals.pop())
    group_values = np.array(group_values)
    if np.any(np.diff(group_values) <= 0):
        return float("-inf")
    total = float(gammaln(hypothesis.num_groups + 1))
    total += float(np.sum(log_latent_prior_density(
        group_values, params.prior_shape, params.prior_mean_scale)))
    for i in range(gene_values.shape[0]):
        total += float(np.sum(log_observation_density(
            gene_values[i], params.state_shapes[i], latent_means[i])))
    return total


# ---------------------------------------------------------------------------
# batched evaluator


@dataclass(frozen=True)
class GeneStats:
    """Sufficient statistics per gene and state: value sums and log-value sums."""

    sums: np.ndarray
    log_sums: np.ndarray
    num_individuals: int


class GvCache:
    """Per-subset log inverse-gamma transforms, recomputed only on shape change.

    Row j holds log gammaincinv(A_j, U) against the evaluator's fixed
    uniforms; a row is stale when its posterior shape A_j moved.
    """

    def __init__(self, evaluator):
        self._ev = evaluator
        n = evaluator.num_subsets
        self._A = np.full(n, np.nan)
        self._rows = np.empty((n, evaluator.log_u_shape[0], evaluator.log_u_shape[1]))

    def rows(self, A, needed=None):
        idx = np.arange(A.size) if needed is None else np.asarray(needed)
        stale = idx[self._A[idx] != A[idx]]
        if stale.size:
            self._rows[stale] = np.log(
                gammaincinv(A[stale][:, None, None], self._ev.order_uniforms[None])
            )
            self._A[stale] = A[stale]
        return self._rows


class CollapsedEvaluator:
    """Collapsed log likelihoods for every gene and pattern at once.

    Groups are represented by state subsets (bitmask order), so the
    per-subset posterior shape A is gene-independent and the per-subset
    posterior scale B is a single matrix product.  Order probabilities
    for all patterns share one fixed block of uniforms (common random
    numbers), making the Monte Carlo factor a deterministic function of
    the parameters; reusing one evaluator therefore means sampling an
    exact posterior of a fixed approximate model rather than a noisy
    approximation of the exact one.
    """

    def __init__(self, hypotheses, num_individuals,
                 mc_samples=DEFAULT_MC_SAMPLES, order_key=DEFAULT_ORDER_SEED):
        if not hypotheses:
            raise ValidationError("hypotheses must be non-empty")
        S = hypotheses[0].num_states
        if any(h.num_states != S for h in hypotheses):
            raise ValidationError("all hypotheses must cover the same states")
        if num_individuals < 1:
            raise ValidationError("num_individuals must be >= 1")
        if mc_samples < 1:
            raise ValidationError("mc_samples must be >= 1")
        self.hypotheses = list(hypotheses)
        self.num_states = S
        self.num_individuals = int(num_individuals)
        self.mc_samples = int(mc_samples)
        self.num_subsets = 2 ** S - 1

        # subset_matrix[i, j] = 1 when state i+1 belongs to subset with mask j+1
        self.subset_matrix = np.zeros((S, self.num_subsets))
        for mask in range(1, self.num_subsets + 1):
            for i in range(S):
                if mask >> i & 1:
                    self.subset_matrix[i, mask - 1] = 1.0

        H = len(hypotheses)
        self.member_matrix = np.zeros((H, self.num_subsets))
        self.num_groups = np.array([h.num_groups for h in hypotheses])
        hyp_subsets = []
        for h in hypotheses:
            subs = [self._subset_id(grp) for grp in h.groups]
            hyp_subsets.append(subs)
            self.member_matrix[h.index, subs] = 1.0
        self.hyp_subsets = hyp_subsets

        # consecutive-pair comparisons, batched by group count
        self.pair_batches = []
        for M in sorted({h.num_groups for h in hypotheses if h.num_groups >= 2}):
            hs = [h.index for h in hypotheses if h.num_groups == M]
            lo = np.array([[hyp_subsets[h][m] for m in range(M - 1)] for h in hs])
            hi = np.array([[hyp_subsets[h][m + 1] for m in range(M - 1)] for h in hs])
            self.pair_batches.append((M, np.array(hs), lo, hi))

        self.order_uniforms = order_factor_rng(order_key).random((S, mc_samples))
        self.log_u_shape = (S, mc_samples)
        self._log_mc = np.log(mc_samples)

    def _subset_id(self, group):
        mask = 0
        for s in group:
            mask |= 1 << (s - 1)
        return mask - 1

    def make_gv_cache(self):
        return GvCache(self)

    def stats(self, dataset):
        if dataset.num_states != self.num_states:
            raise ValidationError("dataset states do not match evaluator")
        if dataset.num_individuals != self.num_individuals:
            raise ValidationError("dataset individuals do not match evaluator")
        return GeneStats(dataset.state_sums(), dataset.state_log_sums(),
                         dataset.num_individuals)

    def post_shapes(self, params):
        """(n_subsets,) posterior shapes A, gene-independent."""
        return params.prior_shape + self.num_individuals * (
            params.state_shapes @ self.subset_matrix
        )

    def log_post_scales(self, stats, params):
        """(G, n_subsets) log posterior scales B."""
        b0 = params.prior_shape * params.prior_mean_scale
        weighted = self.subset_matrix * params.state_shapes[:, None]
        return np.log(b0 + stats.sums @ weighted)

    def data_term(self, stats, params):
        """(G,) pattern-independent piece of the collapsed likelihood."""
        alpha = params.state_shapes
        N = self.num_individuals
        per_state = N * (alpha * np.log(alpha) - gammaln(alpha))
        return per_state.sum() + stats.log_sums @ (alpha - 1.0)

    def _order_counts(self, log_b, log_gv, lo, hi):
        # lo, hi: (n_h, M-1) subset ids for consecutive slots m, m+1
        n_pairs = lo.shape[1]
        slots = np.arange(n_pairs)
        c = log_gv[hi, slots + 1] - log_gv[lo, slots]          # (n_h, M-1, mc)
        d = (log_b[:, hi] - log_b[:, lo]).transpose(1, 2, 0)   # (n_h, M-1, G)
        acc = d[:, 0, :, None] > c[:, 0, None, :]
        for k in range(1, n_pairs):
            acc &= d[:, k, :, None] > c[:, k, None, :]
        return acc.sum(axis=-1)                                # (n_h, G)

    def log_order_factors(self, log_b, A, gv_cache):
        """(G, H) log order factors; zero columns for single-group patterns."""
        G = log_b.shape[0]
        out = np.zeros((G, len(self.hypotheses)))
        if not self.pair_batches:
            return out
        log_gv = gv_cache.rows(A)
        for M, hs, lo, hi in self.pair_batches:
            counts = self._order_counts(log_b, log_gv, lo, hi)
            out[:, hs] = (gammaln(M + 1) - self._log_mc
                          + np.log(np.maximum(counts, 0.5))).T
        return out

    def loglik_matrix(self, stats, params, gv_cache=None):
        """(G, H) log collapsed likelihoods, mixture weights excluded."""
        if gv_cache is None:
            gv_cache = self.make_gv_cache()
        A = self.post_shapes(params)
        log_b = self.log_post_scales(stats, params)
        per_subset = gammaln(A)[None, :] - A[None, :] * log_b
        group_terms = per_subset @ self.member_matrix.T
        a0 = params.prior_shape
        const = self.num_groups * (a0 * np.log(a0 * params.prior_mean_scale)
                                   - gammaln(a0))
        out = group_terms + self.log_order_factors(log_b, A, gv_cache)
        out += const[None, :]
        out += self.data_term(stats, params)[:, None]
        return out

    def loglik_assigned(self, stats, params, assignments, gv_cache=None):
        """(G,) log collapsed likelihood of each gene at its assigned pattern."""
        z = np.asarray(assignments)
        G = stats.sums.shape[0]
        if z.shape != (G,):
            raise ValidationError("assignments must have one entry per gene")
        if gv_cache is None:
            gv_cache = self.make_gv_cache()
        A = self.post_shapes(params)
        log_b = self.log_post_scales(stats, params)
        member = self.member_matrix[z]
        per_subset = gammaln(A)[None, :] - A[None, :] * log_b
        out = (member * per_subset).sum(axis=1)
        a0 = params.prior_shape
        out += self.num_groups[z] * (a0 * np.log(a0 * params.prior_mean_scale)
                                     - gammaln(a0))
        out += self.data_term(stats, params)

        multi = np.unique(z[self.num_groups[z] >= 2])
        if multi.size:
            needed = sorted({s for h in multi for s in self.hyp_subsets[h]})
            log_gv = gv_cache.rows(A, needed=np.array(needed))
            for h in multi:
                genes = np.flatnonzero(z == h)
                subs = self.hyp_subsets[h]
                M = len(subs)
                lo = np.array([subs[:-1]])
                hi = np.array([subs[1:]])
                counts = self._order_counts(log_b[genes], log_gv, lo, hi)[0]
                out[genes] += (gammaln(M + 1) - self._log_mc
                               + np.log(np.maximum(counts, 0.5)))
        return out


def evaluator_for(dataset, hypotheses=None, mc_samples=DEFAULT_MC_SAMPLES,
                  order_key=DEFAULT_ORDER_SEED):
    """Evaluator over a dataset's full pattern space (or a supplied one)."""
    if hypotheses is None:
        hypotheses = enumerate_hypotheses(dataset.num_states)
    return CollapsedEvaluator(hypotheses, dataset.num_individuals,
                              mc_samples, order_key)
