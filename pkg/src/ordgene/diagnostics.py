"""Descriptive analyses that sit beside the model: dispersion ranking,
standardized contrasts, sample clustering, and cross-analysis call
comparison."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class CvRankTable:
    """Per-gene mean, standard deviation, coefficient of variation, and
    their ranks (ascending, ties averaged) after a low-expression filter."""

    gene_ids: tuple
    means: np.ndarray
    sds: np.ndarray
    cvs: np.ndarray
    mean_ranks: np.ndarray
    sd_ranks: np.ndarray
    cv_ranks: np.ndarray
    state: int
    min_expression: float
    num_filtered: int


def cv_rank_table(dataset, state=None, min_expression_quantile=0.25):
    """Rank genes by dispersion, pooled over states or within one state.

    Genes whose mean falls below the given quantile of per-gene means
    are dropped before ranking (low-expression genes have unstable CV
    estimates).  state is 1-based; None pools all samples of a gene.
    """
    if state is None:
        x = dataset.values.reshape(dataset.num_genes, -1)
    else:
        if not 1 <= state <= dataset.num_states:
            raise ValidationError(f"state must be in 1..{dataset.num_states}")
        x = dataset.values[:, state - 1, :]
    if x.shape[1] < 2:
        raise ValidationError("need at least two values per gene to rank dispersion")
    if not 0.0 <= min_expression_quantile < 1.0:
        raise ValidationError("min_expression_quantile must lie in [0, 1)")
    means = x.mean(axis=1)
    threshold = float(np.quantile(means, min_expression_quantile))
    keep = means >= threshold
    if not np.any(keep):
        raise ValidationError("low-expression filter removed every gene")
    means = means[keep]
    sds = x[keep].std(axis=1, ddof=1)
    cvs = sds / means
    return CvRankTable(
        gene_ids=tuple(g for g, k in zip(dataset.gene_ids, keep) if k),
        means=means,
        sds=sds,
        cvs=cvs,
        mean_ranks=rankdata(means),
        sd_ranks=rankdata(sds),
        cv_ranks=rankdata(cvs),
        state=state,
        min_expression=threshold,
        num_filtered=int((~keep).sum()),
    )


@dataclass(frozen=True)
class EffectSizeReport:
    """Standardized contrast between two groups of states for one gene."""

    gene_id: str
    states_a: tuple
    states_b: tuple
    mean_a: float
    mean_b: float
    pooled_sd: float
    effect_size: float


def effect_size(dataset, gene, states_a, states_b):
    """Pooled-standard-deviation contrast (mean_b - mean_a) / s for one gene.

    states_a and states_b are disjoint 1-based state sets; all
    individuals in those states enter each side.  The pooled standard
    deviation uses the usual (n_a - 1, n_b - 1) weighting.
    """
    g = dataset.gene_index(gene)
    a = tuple(sorted(set(int(s) for s in states_a)))
    b = tuple(sorted(set(int(s) for s in states_b)))
    if not a or not b:
        raise ValidationError("state sets must be non-empty")
    if set(a) & set(b):
        raise ValidationError("state sets must be disjoint")
    for s in a + b:
        if not 1 <= s <= dataset.num_states:
            raise ValidationError(f"state {s} out of range 1..{dataset.num_states}")
    xa = dataset.values[g, [s - 1 for s in a], :].ravel()
    xb = dataset.values[g, [s - 1 for s in b], :].ravel()
    na, nb = xa.size, xb.size
    if na + nb < 3:
        raise ValidationError("need at least three values to pool a deviation")
    ssa = (na - 1) * xa.var(ddof=1) if na > 1 else 0.0
    ssb = (nb - 1) * xb.var(ddof=1) if nb > 1 else 0.0
    pooled = float(np.sqrt((ssa + ssb) / (na + nb - 2)))
    if pooled == 0.0:
        raise NumericalError("zero pooled deviation; effect size undefined")
    return EffectSizeReport(
        gene_id=dataset.gene_ids[g],
        states_a=a,
        states_b=b,
        mean_a=float(xa.mean()),
        mean_b=float(xb.mean()),
        pooled_sd=pooled,
        effect_size=float((xb.mean() - xa.mean()) / pooled),
    )


def correlation_distance_matrix(dataset, log_scale=False):
    """(S*N, S*N) distances 1 - Pearson correlation between sample columns.

    Columns are state-major (s1_n1, s1_n2, ...).  Gene vectors may be
    log-transformed first.  Constant columns have no defined correlation
    and raise a NumericalError.
    """
    x = dataset.values.reshape(dataset.num_genes, -1)
    if x.shape[0] < 2:
        raise ValidationError("need at least two genes to correlate samples")
    if log_scale:
        x = np.log(x)
    if np.any(x.std(axis=0) == 0):
        raise NumericalError("constant sample column; correlation undefined")
    corr = np.corrcoef(x, rowvar=False)
    d = 1.0 - corr
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


@dataclass(frozen=True)
class ClusteringResult:
    """Flat assignment plus the full merge history.

    merges rows are (cluster_i, cluster_j, distance, new_cluster): leaf
    clusters are 0..n-1 and merged clusters count upward from n, so the
    tree can be reconstructed or cut elsewhere.
    """

    labels: np.ndarray
    merges: tuple
    linkage: str


def linkage_clusters(distance, num_clusters=2, linkage="average"):
    """Agglomerative clustering with a deterministic tie rule.

    Among pairs at the minimal distance the lexicographically smallest
    (i, j) merges first, so runs are reproducible even with tied
    distances.  Supported linkages: average, single, complete.
    Returns labels 0..num_clusters-1 (ordered by smallest member index)
    and the complete merge list.
    """
    d = np.asarray(distance, dtype=float)
    n = d.shape[0]
    if d.ndim != 2 or d.shape != (n, n) or n < 2:
        raise ValidationError("distance must be a square matrix of size >= 2")
    if not np.allclose(d, d.T) or np.any(np.diag(d) != 0) or np.any(d < 0):
        raise ValidationError("distance must be symmetric, nonnegative, zero diagonal")
    if linkage not in ("average", "single", "complete"):
        raise ValidationError("linkage must be average, single or complete")
    if not 1 <= num_clusters <= n:
        raise ValidationError(f"num_clusters must be in 1..{n}")

    work = d.copy()
    active = list(range(n))                 # positions into work
    cluster_id = list(range(n))             # tree ids of active clusters
    members = {i: [i] for i in range(n)}    # tree id -> leaf list
    sizes = {i: 1 for i in range(n)}
    merges = []
    cut_labels = None
    next_id = n

    while len(active) > 1:
        if len(active) == num_clusters:
            cut_labels = [members[cid] for cid in cluster_id]
        best = None
        for ai in range(len(active)):
            for aj in range(ai + 1, len(active)):
                dist = work[active[ai], active[aj]]
                if best is None or dist < best[0]:
                    best = (dist, ai, aj)
        dist, ai, aj = best
        i, j = active[ai], active[aj]
        ci, cj = cluster_id[ai], cluster_id[aj]
        for ak in range(len(active)):
            if ak in (ai, aj):
                continue
            k = active[ak]
            if linkage == "average":
                new = (sizes[ci] * work[i, k] + sizes[cj] * work[j, k]) / (
                    sizes[ci] + sizes[cj]
                )
            elif linkage == "single":
                new = min(work[i, k], work[j, k])
            else:
                new = max(work[i, k], work[j, k])
            work[i, k] = work[k, i] = new
        merges.append((ci, cj, float(dist), next_id))
        members[next_id] = members[ci] + members[cj]
        sizes[next_id] = sizes[ci] + sizes[cj]
        cluster_id[ai] = next_id
        next_id += 1
        del active[aj], cluster_id[aj]

    if num_clusters == 1:
        cut_labels = [members[cluster_id[0]]]
    if num_clusters == n:
        cut_labels = [[i] for i in range(n)]
    labels = np.empty(n, dtype=np.int64)
    for rank, group in enumerate(sorted(cut_labels, key=min)):
        labels[group] = rank
    return ClusteringResult(labels=labels, merges=tuple(merges), linkage=linkage)


@dataclass(frozen=True)
class DiscrepancyReport:
    """Call disagreements between two analyses over the same genes."""

    gene_ids: tuple
    num_compared: int
    num_discrepancies: int
    disagreements: tuple
    num_nonnull_a: int
    num_nonnull_b: int


def discrepancy_report(result_a, result_b):
    """Compare two inference results gene by gene.

    Genes are aligned by id (both results must cover the same set); a
    disagreement is any difference in the called index, with the null
    call standing in for unselected genes.  disagreements rows are
    (gene_id, call_a, call_b).
    """
    ids_a = result_a.gene_ids
    ids_b = result_b.gene_ids
    if set(ids_a) != set(ids_b):
        raise ValidationError("results cover different gene sets")
    order_b = {g: k for k, g in enumerate(ids_b)}
    calls_a = np.asarray(result_a.calls)
    calls_b = np.asarray(result_b.calls)[[order_b[g] for g in ids_a]]
    null_a = result_a.null_index
    null_b = result_b.null_index
    rows = tuple(
        (g, int(ca), int(cb))
        for g, ca, cb in zip(ids_a, calls_a, calls_b)
        if (ca != cb)
    )
    return DiscrepancyReport(
        gene_ids=tuple(ids_a),
        num_compared=len(ids_a),
        num_discrepancies=len(rows),
        disagreements=rows,
        num_nonnull_a=int((calls_a != null_a).sum()),
        num_nonnull_b=int((calls_b != null_b).sum()),
    )
