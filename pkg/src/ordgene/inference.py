"""Posterior summaries and FDR-calibrated decision rules.

Pattern probabilities are pooled visit frequencies across chains.  A
gene's call is its modal pattern; selection keeps genes whose modal
pattern is nonnull with probability at least a threshold k, and the
direct posterior estimate of the false discovery rate among the
selected genes is the average of their (1 - modal probability).  The
threshold is calibrated by scanning a k grid for the smallest value
whose estimated FDR meets the target.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PosteriorSummary:
    """Pooled posterior quantities over all chains.

    probs : (G, H) per-gene pattern probabilities (rows sum to 1).
    phi_means : (H,) posterior means of the mixture weights.
    param_means / param_quantiles : per global parameter, the pooled
        posterior mean and (2.5%, 50%, 97.5%) quantiles.
    """

    gene_ids: tuple
    probs: np.ndarray
    phi_means: np.ndarray
    param_means: dict
    param_quantiles: dict
    num_retained: int


def summarize(traces, gene_ids=None):
    """Pool retained draws from one or more chains into a PosteriorSummary.

    Traces must agree on genes, hypotheses, and parameter names.  Pooling
    is associative: summarizing two half-traces equals summarizing the
    whole, because probabilities are visit counts over total retained
    iterations.
    """
    if not traces:
        raise ValidationError("traces must be non-empty")
    first = traces[0]
    G, H = first.visit_counts.shape
    for t in traces:
        if t.visit_counts.shape != (G, H) or t.names != first.names:
            raise ValidationError("traces disagree on genes, hypotheses or parameters")
    total = sum(t.num_retained for t in traces)
    if total < 1:
        raise ValidationError("no retained iterations to summarize")
    counts = sum(t.visit_counts for t in traces)
    probs = counts / total
    phi_means = np.concatenate([t.phi for t in traces]).mean(axis=0)
    names = first.names
    pooled = {n: np.concatenate([t.param_draws(n) for t in traces]) for n in names}
    param_means = {n: float(d.mean()) for n, d in pooled.items()}
    param_quantiles = {
        n: tuple(np.quantile(d, [0.025, 0.5, 0.975])) for n, d in pooled.items()
    }
    if gene_ids is None:
        gene_ids = tuple(f"g{k:04d}" for k in range(1, G + 1))
    else:
        gene_ids = tuple(gene_ids)
        if len(gene_ids) != G:
            raise ValidationError("gene_ids length must match traces")
    return PosteriorSummary(gene_ids, probs, phi_means, param_means,
                            param_quantiles, total)


def modal_hypothesis(prob_row):
    """(index, probability) of the most probable pattern; ties break low."""
    prob_row = np.asarray(prob_row, dtype=float)
    if prob_row.ndim != 1 or prob_row.size < 1:
        raise ValidationError("prob_row must be a 1-D vector")
    idx = int(np.argmax(prob_row))
    return idx, float(prob_row[idx])


def _check_probs(probs):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.size == 0:
        raise ValidationError("probs must be (genes, hypotheses)")
    if np.any(probs < 0) or np.any(probs > 1 + 1e-9):
        raise ValidationError("probabilities must lie in [0, 1]")
    return probs


def _modal(probs):
    idx = probs.argmax(axis=1)
    return idx, probs[np.arange(probs.shape[0]), idx]


def _fdr_many(probs, threshold, null_index):
    idx, p = _modal(probs)
    selected = np.flatnonzero((idx != null_index) & (p >= threshold))
    fdr = float((1.0 - p[selected]).mean()) if selected.size else 0.0
    return fdr, selected


def _fdr_null_split(probs, threshold, null_index):
    p_null = probs[:, null_index]
    selected = np.flatnonzero(1.0 - p_null >= threshold)
    fdr = float(p_null[selected].mean()) if selected.size else 0.0
    return fdr, selected


def fdr_many_hypotheses(summary, threshold, null_index=0):
    """Estimated FDR and selected gene indices, pattern-level errors.

    A selected gene's error probability is one minus its modal-pattern
    probability, so a gene called with the wrong nonnull pattern counts
    as a false discovery.  Empty selections have FDR 0 by convention.
    """
    probs = _check_probs(summary.probs)
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [0, 1]")
    return _fdr_many(probs, threshold, null_index)


def fdr_null_vs_nonnull(summary, threshold, null_index=0):
    """Estimated FDR and selected genes when only null/nonnull matters."""
    probs = _check_probs(summary.probs)
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [0, 1]")
    return _fdr_null_split(probs, threshold, null_index)


def fdr_curve(summary, grid_step=0.001, null_index=0, rule="many"):
    """(K, 3) array of threshold, estimated FDR, and selection size.

    The grid spans [0, 1] inclusive.  The estimated FDR is nonincreasing
    in the threshold: raising k drops the genes with the largest error
    terms from the average.
    """
    probs = _check_probs(summary.probs)
    if not 0.0 < grid_step <= 0.5:
        raise ValidationError("grid_step must lie in (0, 0.5]")
    if rule not in ("many", "null"):
        raise ValidationError("rule must be 'many' or 'null'")
    estimator = _fdr_many if rule == "many" else _fdr_null_split
    ks = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
    ks[-1] = min(ks[-1], 1.0)
    out = np.empty((ks.size, 3))
    for i, k in enumerate(ks):
        fdr, selected = estimator(probs, k, null_index)
        out[i] = (k, fdr, selected.size)
    return out


@dataclass(frozen=True)
class InferenceResult:
    """Per-gene decisions at a calibrated threshold.

    calls[g] is the modal index where selected, else the null index.
    warning is set when no grid threshold met the target with a
    non-empty selection and the threshold fell back to the smallest
    value that empties the selection.  labels names the decision units
    when they are collapsed groups rather than raw patterns.
    """

    gene_ids: tuple
    modal_index: np.ndarray
    modal_probability: np.ndarray
    selected: np.ndarray
    calls: np.ndarray
    threshold: float
    target_fdr: float
    achieved_fdr: float
    warning: bool
    curve: np.ndarray
    null_index: int = 0
    labels: tuple = None

    @property
    def num_selected(self):
        return int(self.selected.sum())


def _calibrate(gene_ids, probs, target_fdr, grid_step, null_index, labels=None):
    if not 0.0 < target_fdr < 1.0:
        raise ValidationError("target_fdr must lie in (0, 1)")
    ks = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
    ks[-1] = min(ks[-1], 1.0)
    rows = []
    chosen = None
    first_empty = None
    for k in ks:
        fdr, selected = _fdr_many(probs, k, null_index)
        rows.append((k, fdr, selected.size))
        if chosen is None and selected.size and fdr <= target_fdr:
            chosen = float(k)
        if first_empty is None and selected.size == 0:
            first_empty = float(k)
    curve = np.array(rows)
    warning = chosen is None
    if warning:
        chosen = 1.0 if first_empty is None else first_empty
    fdr, selected_idx = _fdr_many(probs, chosen, null_index)
    idx, p = _modal(probs)
    selected = np.zeros(probs.shape[0], dtype=bool)
    selected[selected_idx] = True
    calls = np.where(selected, idx, null_index)
    return InferenceResult(
        gene_ids=tuple(gene_ids),
        modal_index=idx,
        modal_probability=p,
        selected=selected,
        calls=calls,
        threshold=float(chosen),
        target_fdr=float(target_fdr),
        achieved_fdr=float(fdr),
        warning=bool(warning),
        curve=curve,
        null_index=null_index,
        labels=labels,
    )


def calibrate_threshold(summary, target_fdr=0.05, grid_step=0.001):
    """Smallest grid threshold whose estimated FDR meets the target.

    Scans k = 0, grid_step, ..., 1 and returns decisions at the first k
    with a non-empty selection and estimated FDR at most target_fdr.
    If no such k exists the threshold falls back to the smallest k with
    an empty selection and the result carries a warning instead of
    silently reporting discoveries above the target.
    """
    probs = _check_probs(summary.probs)
    if not 0.0 < grid_step <= 0.5:
        raise ValidationError("grid_step must lie in (0, 0.5]")
    return _calibrate(summary.gene_ids, probs, target_fdr, grid_step, 0)


def collapsed_inference(summary, groups, target_fdr=0.05, grid_step=0.001):
    """Calibrated decisions over labelled pattern groups.

    groups must partition the pattern indices; per-gene group
    probabilities are sums of member-pattern probabilities, and the
    group containing the null pattern plays the null's role.
    """
    probs = _check_probs(summary.probs)
    if not 0.0 < grid_step <= 0.5:
        raise ValidationError("grid_step must lie in (0, 0.5]")
    H = probs.shape[1]
    seen = {}
    for gi, grp in enumerate(groups):
        for h in grp.members:
            if h in seen:
                raise ValidationError(
                    f"overlapping groups: pattern {h} in {groups[seen[h]].label!r} "
                    f"and {grp.label!r}"
                )
            if not 0 <= h < H:
                raise ValidationError(f"pattern index {h} out of range")
            seen[h] = gi
    if len(seen) != H:
        missing = sorted(set(range(H)) - set(seen))
        raise ValidationError(f"groups do not cover patterns {missing[:5]}")
    null_group = seen[0]
    indicator = np.zeros((H, len(groups)))
    for h, gi in seen.items():
        indicator[h, gi] = 1.0
    group_probs = probs @ indicator
    labels = tuple(g.label for g in groups)
    return _calibrate(summary.gene_ids, group_probs, target_fdr, grid_step,
                      null_group, labels=labels)
