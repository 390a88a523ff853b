"""Flat-file formats: expression tables, fit artifacts, configs.

Expression data travels as TSV with a gene_id column followed by
s{i}_n{j} sample columns, state-major.  Floats are written with repr,
whose shortest-round-trip decimals re-read to the identical bits, so
write/ingest is lossless and rerun outputs can be compared byte for
byte.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import ExpressionDataset

INGEST_FLOOR = 1e-12

_COLUMN = re.compile(r"^s(\d+)_n(\d+)$")


def _fmt(x):
    return repr(float(x))


def write_expression_tsv(dataset, path):
    """Write a dataset in the canonical TSV layout."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_id\t" + "\t".join(dataset.column_labels()) + "\n")
        flat = dataset.values.reshape(dataset.num_genes, -1)
        for gid, row in zip(dataset.gene_ids, flat):
            fh.write(gid + "\t" + "\t".join(_fmt(v) for v in row) + "\n")


def _parse_header(fields, path):
    if not fields or fields[0] != "gene_id":
        raise ValidationError(f"{path} line 1: first column must be gene_id")
    states = []
    for col in fields[1:]:
        m = _COLUMN.match(col)
        if not m:
            raise ValidationError(
                f"{path} line 1: bad column {col!r}, expected s<i>_n<j>"
            )
        states.append((int(m.group(1)), int(m.group(2))))
    if not states:
        raise ValidationError(f"{path} line 1: no sample columns")
    S = max(s for s, _ in states)
    N = max(n for _, n in states)
    expected = [(i, j) for i in range(1, S + 1) for j in range(1, N + 1)]
    if states != expected:
        raise ValidationError(
            f"{path} line 1: sample columns must run s1_n1..s{S}_n{N} state-major"
        )
    return S, N


def ingest_expression_tsv(path, epsilon_floor=False):
    """Read an expression TSV, validating layout and value domain.

    Values must be finite and strictly positive; values below 1e-12 are
    rejected as effectively zero unless epsilon_floor is set, in which
    case they are raised to 1e-12 (the clamp is reported nowhere else,
    so leave it off unless the source is known to round tiny values).
    Errors carry the file, line, and offending (gene, state, individual).
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty file")
    S, N = _parse_header(lines[0].split("\t"), path)
    width = 1 + S * N
    ids = []
    seen = set()
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            if lineno == len(lines):
                continue
            raise ValidationError(f"{path} line {lineno}: blank line")
        fields = line.split("\t")
        if len(fields) != width:
            raise ValidationError(
                f"{path} line {lineno}: expected {width} fields, found {len(fields)}"
            )
        gid = fields[0]
        if not gid:
            raise ValidationError(f"{path} line {lineno}: empty gene id")
        if gid in seen:
            raise ValidationError(f"{path} line {lineno}: duplicate gene id {gid!r}")
        seen.add(gid)
        row = np.empty(S * N)
        for k, tok in enumerate(fields[1:]):
            i, j = divmod(k, N)
            where = f"gene {gid!r}, state {i + 1}, individual {j + 1}"
            try:
                v = float(tok)
            except ValueError:
                raise ValidationError(
                    f"{path} line {lineno}: unparseable value {tok!r} for {where}"
                ) from None
            if not np.isfinite(v):
                raise ValidationError(
                    f"{path} line {lineno}: non-finite value {tok} for {where}"
                )
            if v <= 0:
                raise ValidationError(
                    f"{path} line {lineno}: non-positive value {tok} for {where}"
                )
            if v < INGEST_FLOOR:
                if not epsilon_floor:
                    raise ValidationError(
                        f"{path} line {lineno}: value {tok} below {INGEST_FLOOR} "
                        f"for {where}; pass the floor option to clamp"
                    )
                v = INGEST_FLOOR
            row[k] = v
        ids.append(gid)
        rows.append(row)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    values = np.array(rows).reshape(len(rows), S, N)
    return ExpressionDataset(values, ids)


# ---------------------------------------------------------------------------
# fit artifacts


def write_inference_tsv(result, path, group_labels=None):
    """Per-gene decisions: gene_id, modal_index, modal_probability,
    selected, group_label.  group_labels maps each gene to its modal
    collapsed group when a grouping is active; '-' otherwise."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_id\tmodal_index\tmodal_probability\tselected\tgroup_label\n")
        for k, gid in enumerate(result.gene_ids):
            label = group_labels[k] if group_labels is not None else "-"
            fh.write(
                f"{gid}\t{int(result.modal_index[k])}\t"
                f"{_fmt(result.modal_probability[k])}\t"
                f"{int(result.selected[k])}\t{label}\n"
            )


@dataclass(frozen=True)
class InferenceCalls:
    """Decisions re-read from an inference TSV (null index 0)."""

    gene_ids: tuple
    modal_index: np.ndarray
    modal_probability: np.ndarray
    selected: np.ndarray
    group_labels: tuple
    null_index: int = 0

    @property
    def calls(self):
        return np.where(self.selected, self.modal_index, self.null_index)


def read_inference_tsv(path):
    """Re-read decisions written by write_inference_tsv."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = "gene_id\tmodal_index\tmodal_probability\tselected\tgroup_label"
    if not lines or lines[0] != header:
        raise ValidationError(f"{path} line 1: not an inference table")
    ids, modal, prob, sel, labels = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line and lineno == len(lines):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValidationError(
                f"{path} line {lineno}: expected 5 fields, found {len(fields)}"
            )
        try:
            ids.append(fields[0])
            modal.append(int(fields[1]))
            prob.append(float(fields[2]))
            sel.append(bool(int(fields[3])))
            labels.append(fields[4])
        except ValueError:
            raise ValidationError(f"{path} line {lineno}: unparseable row") from None
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate gene ids")
    return InferenceCalls(
        gene_ids=tuple(ids),
        modal_index=np.array(modal, dtype=np.int64),
        modal_probability=np.array(prob),
        selected=np.array(sel, dtype=bool),
        group_labels=tuple(labels),
    )


def write_fdr_curve_tsv(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold\tfdr_estimate\tnum_selected\n")
        for k, fdr, n in curve:
            fh.write(f"{_fmt(k)}\t{_fmt(fdr)}\t{int(n)}\n")


def write_trace_tsv(trace, path):
    """One chain's retained draws: iteration, global parameters, weights."""
    H = trace.phi.shape[1]
    cols = ["iteration", *trace.names] + [f"phi_{h}" for h in range(H)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in range(trace.num_retained):
            it = trace.burn_in + 1 + r * trace.thinning
            vals = [str(it)]
            vals += [_fmt(v) for v in trace.alpha[r]]
            vals += [_fmt(trace.alpha0[r]), _fmt(trace.mu0[r])]
            vals += [_fmt(v) for v in trace.phi[r]]
            fh.write("\t".join(vals) + "\n")


def write_visits_tsv(traces, gene_ids, path):
    """Pooled per-gene visit counts, one column per pattern index."""
    counts = sum(t.visit_counts for t in traces)
    H = counts.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_id\t" + "\t".join(f"h{h}" for h in range(H)) + "\n")
        for gid, row in zip(gene_ids, counts):
            fh.write(gid + "\t" + "\t".join(str(int(c)) for c in row) + "\n")


def write_convergence_txt(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"available = {'yes' if report.available else 'no'}\n")
        fh.write(f"num_chains = {report.num_chains}\n")
        fh.write(f"num_retained = {report.num_retained}\n")
        fh.write(f"threshold = {_fmt(report.threshold)}\n")
        if report.available:
            fh.write(f"converged = {'yes' if report.converged else 'no'}\n")
            fh.write(f"max_rhat = {_fmt(report.worst())}\n")
            for name, value in report.rhat.items():
                fh.write(f"rhat_{name} = {_fmt(value)}\n")
        else:
            fh.write("converged = unknown\n")


def write_summary_txt(result, summary, hypotheses, report, path):
    """Headline numbers plus per-pattern counts among selected genes."""
    calls = result.calls
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"num_genes = {len(result.gene_ids)}\n")
        fh.write(f"target_fdr = {_fmt(result.target_fdr)}\n")
        fh.write(f"threshold = {_fmt(result.threshold)}\n")
        fh.write(f"fdr_estimate = {_fmt(result.achieved_fdr)}\n")
        fh.write(f"num_selected = {result.num_selected}\n")
        fh.write(f"calibration_warning = {'yes' if result.warning else 'no'}\n")
        if report.available:
            fh.write(f"converged = {'yes' if report.converged else 'no'}\n")
            fh.write(f"max_rhat = {_fmt(report.worst())}\n")
        else:
            fh.write("converged = unknown (single chain)\n")
        for name in summary.param_means:
            lo, med, hi = summary.param_quantiles[name]
            fh.write(
                f"{name} = {_fmt(summary.param_means[name])} "
                f"(2.5% {_fmt(lo)}, 50% {_fmt(med)}, 97.5% {_fmt(hi)})\n"
            )
        fh.write("\nindex\tpattern\tphi_mean\tnum_selected\n")
        order = np.argsort(-summary.phi_means[1:]) + 1
        for h in order:
            n_sel = int(((calls == h) & result.selected).sum())
            fh.write(
                f"{h}\t{hypotheses[h].pattern()}\t"
                f"{_fmt(summary.phi_means[h])}\t{n_sel}\n"
            )


def write_groups_tsv(groups, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label\tdescription\tmembers\n")
        for g in groups:
            members = ",".join(str(h) for h in g.members)
            fh.write(f"{g.label}\t{g.description}\t{members}\n")


def write_collapsed_tsv(result, path):
    """Group-level decisions: gene_id, modal_group, group_probability,
    selected."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_id\tmodal_group\tgroup_probability\tselected\n")
        for k, gid in enumerate(result.gene_ids):
            fh.write(
                f"{gid}\t{result.labels[result.modal_index[k]]}\t"
                f"{_fmt(result.modal_probability[k])}\t{int(result.selected[k])}\n"
            )


def write_discrepancies_tsv(report, path):
    """Call disagreements; header only when report is None (nothing to
    compare) or no genes disagree."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_id\tcall_a\tcall_b\n")
        if report is not None:
            for gid, ca, cb in report.disagreements:
                fh.write(f"{gid}\t{ca}\t{cb}\n")


def write_coverage_tsv(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("parameter\ttrue_value\tmean_posterior_mean\tcoverage\n")
        for k, name in enumerate(report.names):
            fh.write(
                f"{name}\t{_fmt(report.true_values[k])}\t"
                f"{_fmt(report.mean_posterior_means[k])}\t"
                f"{_fmt(report.coverage[k])}\n"
            )
        fh.write(
            f"nonnull_fraction\t{_fmt(report.true_nonnull.mean())}\t"
            f"{_fmt(report.nonnull_mean)}\t-\n"
        )


# ---------------------------------------------------------------------------
# config files


def read_config_file(path):
    """Flat key=value config; # starts a comment; values stay strings."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(
                    f"{path} line {lineno}: expected key = value"
                )
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ValidationError(f"{path} line {lineno}: empty key or value")
            if key in out:
                raise ValidationError(f"{path} line {lineno}: duplicate key {key!r}")
            out[key] = value
    return out
