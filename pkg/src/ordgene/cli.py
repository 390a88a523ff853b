"""Command line interface.

Subcommands: fit, simulate, coverage, diagnose, compare, hypotheses.
Options may come from a flat key=value config file (--config, or the
ORDGENE_CONFIG environment variable); explicit flags win over the file.
Exit codes: 0 success, 2 validation/usage, 3 numerical failure, 4 I/O.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .diagnostics import (
    correlation_distance_matrix,
    cv_rank_table,
    discrepancy_report,
    effect_size,
    linkage_clusters,
)
from .errors import NumericalError, ValidationError
from .hypspace import enumerate_hypotheses, standard_grouping
from .inference import calibrate_threshold, collapsed_inference, summarize
from .model import GlobalParams, PriorConfig
from .sampler import SamplerConfig, run_chains
from .simulate import (
    coverage_experiment,
    default_pattern_weights,
    generate_dataset,
    reference_simulation_params,
)

CONFIG_ENV = "ORDGENE_CONFIG"

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _r(x):
    # bare repr of a numpy scalar would leak the dtype wrapper into files
    return repr(float(x))


def _coerce(key, raw, kind):
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            word = str(raw).strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[word]
        return kind(raw)
    except (TypeError, ValueError):
        raise ValidationError(f"config key {key!r}: bad value {raw!r}") from None


def _load_config(path_flag):
    path = path_flag or os.environ.get(CONFIG_ENV)
    if not path:
        return {}, None
    return dataio.read_config_file(path), path


def _setting(args, config, key, kind, default):
    # the file entry is consumed either way: a flag overrides it rather
    # than leaving it behind to trip the unknown-key check
    raw = config.pop(key, None)
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if raw is not None:
        return _coerce(key, raw, kind)
    return default


def _sampler_config(args, config):
    prior = PriorConfig(
        dirichlet_weight=_setting(args, config, "omega", float, 0.001),
        uniform_upper=_setting(args, config, "upper_bound", float, 10_000.0),
    )
    return SamplerConfig(
        num_chains=_setting(args, config, "chains", int, 3),
        num_iterations=_setting(args, config, "iterations", int, 20_000),
        burn_in=_setting(args, config, "burn_in", int, 5_000),
        thinning=_setting(args, config, "thinning", int, 1),
        d_factor_samples=_setting(args, config, "d_samples", int, 512),
        master_seed=_setting(args, config, "seed", int, 0),
        prior=prior,
    )


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_states(text):
    try:
        states = tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ValidationError(f"bad state list {text!r}") from None
    if not states:
        raise ValidationError(f"bad state list {text!r}")
    return states


def _cmd_fit(args):
    config, _ = _load_config(args.config)
    dataset = dataio.ingest_expression_tsv(args.data,
                                           epsilon_floor=bool(args.epsilon_floor))
    cfg = _sampler_config(args, config)
    fdr = _setting(args, config, "fdr", float, 0.05)
    grid = _setting(args, config, "grid_step", float, 0.001)
    grouping = _setting(args, config, "grouping", str, "none")
    workers = _setting(args, config, "workers", int, 1)
    if config:
        raise ValidationError(f"unknown config keys: {sorted(config)}")
    if grouping not in ("none", "standard"):
        raise ValidationError("grouping must be 'none' or 'standard'")

    hypotheses = enumerate_hypotheses(dataset.num_states)
    traces, report = run_chains(dataset, cfg, workers=workers)
    summary = summarize(traces, dataset.gene_ids)
    result = calibrate_threshold(summary, fdr, grid)

    out = _outdir(args.out)
    group_labels = None
    if grouping == "standard":
        groups = standard_grouping(hypotheses)
        collapsed = collapsed_inference(summary, groups, fdr, grid)
        label_of = {}
        for g in groups:
            for h in g.members:
                label_of[h] = g.label
        group_labels = [label_of[int(h)] for h in result.modal_index]
        dataio.write_groups_tsv(groups, out / "groups.tsv")
        dataio.write_collapsed_tsv(collapsed, out / "collapsed.tsv")
        dataio.write_fdr_curve_tsv(collapsed.curve, out / "collapsed_fdr_curve.tsv")
    dataio.write_inference_tsv(result, out / "inference.tsv", group_labels)
    dataio.write_fdr_curve_tsv(result.curve, out / "fdr_curve.tsv")
    dataio.write_summary_txt(result, summary, hypotheses, report, out / "summary.txt")
    dataio.write_visits_tsv(traces, dataset.gene_ids, out / "visits.tsv")
    dataio.write_convergence_txt(report, out / "convergence.txt")
    for t in traces:
        dataio.write_trace_tsv(t, out / f"trace_chain{t.chain_index}.tsv")

    conv = "unknown" if not report.available else ("yes" if report.converged else "no")
    print(f"genes={dataset.num_genes} patterns={len(hypotheses)} "
          f"threshold={result.threshold:.3f} selected={result.num_selected} "
          f"warning={'yes' if result.warning else 'no'} converged={conv}")
    return 0


def _cmd_simulate(args):
    config, _ = _load_config(args.config)
    S = _setting(args, config, "states", int, 4)
    G = _setting(args, config, "genes", int, 100)
    N = _setting(args, config, "individuals", int, 13)
    seed = _setting(args, config, "seed", int, 1)
    nonnull = _setting(args, config, "nonnull_fraction", float, 0.25)
    a0 = _setting(args, config, "alpha0", float, 5.0)
    mu0 = _setting(args, config, "mu0", float, 9.0)
    alpha_text = _setting(args, config, "alpha", str, "25")
    if config:
        raise ValidationError(f"unknown config keys: {sorted(config)}")
    try:
        alpha = [float(t) for t in str(alpha_text).split(",")]
    except ValueError:
        raise ValidationError(f"bad alpha list {alpha_text!r}") from None
    if len(alpha) == 1:
        alpha = alpha * S
    if len(alpha) != S:
        raise ValidationError(f"alpha must have 1 or {S} entries")

    hypotheses = enumerate_hypotheses(S)
    params = GlobalParams(
        state_shapes=np.array(alpha),
        prior_shape=a0,
        prior_mean_scale=mu0,
        mixture_weights=default_pattern_weights(hypotheses, nonnull),
    )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    dataset, truth = generate_dataset(params, G, N, rng)

    out = _outdir(args.out)
    dataio.write_expression_tsv(dataset, out / "data.tsv")
    with open(out / "truth.tsv", "w", encoding="utf-8") as fh:
        mean_cols = "\t".join(f"mean_{i}" for i in range(1, S + 1))
        fh.write(f"gene_id\tpattern_index\tpattern\t{mean_cols}\n")
        for g, gid in enumerate(dataset.gene_ids):
            h = hypotheses[truth.assignments[g]]
            means = "\t".join(repr(float(v)) for v in truth.latent_means[g])
            fh.write(f"{gid}\t{h.index}\t{h.pattern()}\t{means}\n")
    with open(out / "params.txt", "w", encoding="utf-8") as fh:
        fh.write(f"states = {S}\ngenes = {G}\nindividuals = {N}\nseed = {seed}\n")
        fh.write(f"alpha = {','.join(repr(a) for a in alpha)}\n")
        fh.write(f"alpha0 = {a0!r}\nmu0 = {mu0!r}\n")
        fh.write(f"nonnull_fraction = {nonnull!r}\n")
        fh.write(f"true_nonnull_fraction = {truth.nonnull_fraction!r}\n")
    print(f"wrote {G} genes ({S} states x {N} individuals) to {out / 'data.tsv'}")
    return 0


def _cmd_coverage(args):
    config, _ = _load_config(args.config)
    replicates = _setting(args, config, "replicates", int, 25)
    G = _setting(args, config, "genes", int, 100)
    N = _setting(args, config, "individuals", int, 13)
    fdr = _setting(args, config, "fdr", float, 0.05)
    grid = _setting(args, config, "grid_step", float, 0.001)
    workers = _setting(args, config, "workers", int, 1)
    seed = _setting(args, config, "seed", int, 20_000)
    nonnull = _setting(args, config, "nonnull_fraction", float, 0.25)
    # desk-scale sampler defaults: a single adaptively burned-in chain per
    # replicate keeps 25 fits tractable on one core
    if getattr(args, "chains", None) is None:
        args.chains = 1
    if getattr(args, "iterations", None) is None:
        args.iterations = 2_500
    if getattr(args, "burn_in", None) is None:
        args.burn_in = 600
    if getattr(args, "d_samples", None) is None:
        args.d_samples = 128
    cfg = _sampler_config(args, config)
    if config:
        raise ValidationError(f"unknown config keys: {sorted(config)}")

    params = reference_simulation_params(4, nonnull)
    report = coverage_experiment(replicates, G, N, cfg, true_params=params,
                                 target_fdr=fdr, grid_step=grid,
                                 workers=workers, master_seed=seed)
    out = _outdir(args.out)
    dataio.write_coverage_tsv(report, out / "coverage.tsv")
    with open(out / "coverage_summary.txt", "w", encoding="utf-8") as fh:
        fh.write(f"replicates = {replicates}\ngenes = {G}\nindividuals = {N}\n")
        for k, name in enumerate(report.names):
            fh.write(
                f"{name}: true {_r(report.true_values[k])} "
                f"mean {report.mean_posterior_means[k]:.4f} "
                f"coverage {report.coverage[k]:.3f}\n"
            )
        fh.write(
            f"nonnull: true {report.true_nonnull.mean():.4f} "
            f"inferred {report.nonnull_mean:.4f} sd {report.nonnull_sd:.4f}\n"
        )
    print(f"coverage over {replicates} replicates written to {out}")
    return 0


def _cmd_diagnose(args):
    config, _ = _load_config(args.config)
    quantile = _setting(args, config, "min_expression_quantile", float, 0.25)
    linkage = _setting(args, config, "linkage", str, "average")
    clusters = _setting(args, config, "clusters", int, 2)
    if config:
        raise ValidationError(f"unknown config keys: {sorted(config)}")
    dataset = dataio.ingest_expression_tsv(args.data,
                                           epsilon_floor=bool(args.epsilon_floor))
    out = _outdir(args.out)

    table = cv_rank_table(dataset, state=args.state,
                          min_expression_quantile=quantile)
    with open(out / "cv_ranks.tsv", "w", encoding="utf-8") as fh:
        fh.write("gene_id\tmean\tsd\tcv\tmean_rank\tsd_rank\tcv_rank\n")
        for k, gid in enumerate(table.gene_ids):
            fh.write(
                f"{gid}\t{_r(table.means[k])}\t{_r(table.sds[k])}\t"
                f"{_r(table.cvs[k])}\t{_r(table.mean_ranks[k])}\t"
                f"{_r(table.sd_ranks[k])}\t{_r(table.cv_ranks[k])}\n"
            )

    dist = correlation_distance_matrix(dataset, log_scale=bool(args.log_scale))
    clustering = linkage_clusters(dist, num_clusters=clusters, linkage=linkage)
    labels = dataset.column_labels()
    with open(out / "clusters.tsv", "w", encoding="utf-8") as fh:
        fh.write("sample\tcluster\n")
        for name, lab in zip(labels, clustering.labels):
            fh.write(f"{name}\t{int(lab)}\n")
    with open(out / "merges.tsv", "w", encoding="utf-8") as fh:
        fh.write("cluster_i\tcluster_j\tdistance\tnew_cluster\n")
        for ci, cj, dv, nid in clustering.merges:
            fh.write(f"{int(ci)}\t{int(cj)}\t{_r(dv)}\t{int(nid)}\n")

    if (args.states_a is None) != (args.states_b is None):
        raise ValidationError("states-a and states-b must be given together")
    if args.states_a is not None:
        sa = _parse_states(args.states_a)
        sb = _parse_states(args.states_b)
        with open(out / "effects.tsv", "w", encoding="utf-8") as fh:
            fh.write("gene_id\tmean_a\tmean_b\tpooled_sd\teffect_size\n")
            for gid in dataset.gene_ids:
                rep = effect_size(dataset, gid, sa, sb)
                fh.write(
                    f"{gid}\t{rep.mean_a!r}\t{rep.mean_b!r}\t"
                    f"{rep.pooled_sd!r}\t{rep.effect_size!r}\n"
                )

    if (args.result_a is None) != (args.result_b is None):
        raise ValidationError("result-a and result-b must be given together")
    report = None
    if args.result_a is not None:
        report = discrepancy_report(dataio.read_inference_tsv(args.result_a),
                                    dataio.read_inference_tsv(args.result_b))
    dataio.write_discrepancies_tsv(report, out / "discrepancies.tsv")
    print(f"diagnostics written to {out}")
    return 0


def _cmd_compare(args):
    report = discrepancy_report(dataio.read_inference_tsv(args.result_a),
                                dataio.read_inference_tsv(args.result_b))
    out = _outdir(args.out)
    dataio.write_discrepancies_tsv(report, out / "discrepancies.tsv")
    with open(out / "compare_summary.txt", "w", encoding="utf-8") as fh:
        fh.write(f"num_compared = {report.num_compared}\n")
        fh.write(f"num_discrepancies = {report.num_discrepancies}\n")
        fh.write(f"num_nonnull_a = {report.num_nonnull_a}\n")
        fh.write(f"num_nonnull_b = {report.num_nonnull_b}\n")
    print(f"{report.num_discrepancies} of {report.num_compared} calls disagree")
    return 0


def _cmd_hypotheses(args):
    hypotheses = enumerate_hypotheses(args.states)
    groups = None
    if args.grouping == "standard":
        label_of = {}
        for g in standard_grouping(hypotheses):
            for h in g.members:
                label_of[h] = g.label
        groups = label_of
    header = "index\tnum_groups\tgroups\tpattern"
    if groups:
        header += "\tgroup_label"
    print(header)
    for h in hypotheses:
        groups_text = "|".join(",".join(str(s) for s in grp) for grp in h.groups)
        line = f"{h.index}\t{h.num_groups}\t{groups_text}\t{h.pattern()}"
        if groups:
            line += f"\t{groups[h.index]}"
        print(line)
    return 0


def _int_flag(parser, name, help_text):
    parser.add_argument(name, type=int, default=None, help=help_text)


def _float_flag(parser, name, help_text):
    parser.add_argument(name, type=float, default=None, help=help_text)


def _add_sampler_flags(p):
    _int_flag(p, "--chains", "number of chains")
    _int_flag(p, "--iterations", "iterations per chain")
    _int_flag(p, "--burn-in", "burn-in iterations")
    _int_flag(p, "--thinning", "retain every k-th draw")
    _int_flag(p, "--d-samples", "Monte Carlo draws for order factors")
    _int_flag(p, "--seed", "master seed")
    _float_flag(p, "--omega", "Dirichlet weight on pattern mixture")
    _float_flag(p, "--upper-bound", "upper bound of uniform priors")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ordgene",
        description="Ordered equality pattern inference for grouped expression data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="run the sampler on a dataset")
    p.add_argument("--data", required=True, help="expression TSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--epsilon-floor", action="store_true",
                   help="clamp values below 1e-12 instead of rejecting")
    _add_sampler_flags(p)
    _float_flag(p, "--fdr", "target FDR")
    _float_flag(p, "--grid-step", "threshold grid step")
    p.add_argument("--grouping", choices=("none", "standard"), default=None)
    _int_flag(p, "--workers", "parallel worker processes for chains")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("simulate", help="draw a dataset from the model")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _int_flag(p, "--genes", "number of genes")
    _int_flag(p, "--states", "number of states")
    _int_flag(p, "--individuals", "individuals per state")
    _int_flag(p, "--seed", "generation seed")
    p.add_argument("--alpha", default=None,
                   help="state shapes, single value or comma list")
    _float_flag(p, "--alpha0", "latent prior shape")
    _float_flag(p, "--mu0", "latent prior mean scale")
    _float_flag(p, "--nonnull-fraction", "total nonnull mixture weight")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("coverage", help="repeated simulate-and-fit at known truth")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _int_flag(p, "--replicates", "number of replicate datasets")
    _int_flag(p, "--genes", "genes per replicate")
    _int_flag(p, "--individuals", "individuals per state")
    _add_sampler_flags(p)
    _float_flag(p, "--fdr", "target FDR")
    _float_flag(p, "--grid-step", "threshold grid step")
    _float_flag(p, "--nonnull-fraction", "true nonnull weight")
    _int_flag(p, "--workers", "parallel worker processes for replicates")
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("diagnose", help="descriptive diagnostics for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epsilon-floor", action="store_true")
    p.add_argument("--state", type=int, default=None,
                   help="restrict dispersion ranking to one state (1-based)")
    _float_flag(p, "--min-expression-quantile", "low-expression filter quantile")
    p.add_argument("--log-scale", action="store_true",
                   help="correlate log-transformed values")
    p.add_argument("--linkage", choices=("average", "single", "complete"),
                   default=None)
    _int_flag(p, "--clusters", "flat cluster count")
    p.add_argument("--states-a", default=None, help="contrast side A, e.g. 1,3")
    p.add_argument("--states-b", default=None, help="contrast side B, e.g. 2,4")
    p.add_argument("--result-a", default=None, help="inference.tsv to compare")
    p.add_argument("--result-b", default=None, help="inference.tsv to compare")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("compare", help="compare two inference results")
    p.add_argument("--result-a", required=True)
    p.add_argument("--result-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("hypotheses", help="print the pattern enumeration")
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--grouping", choices=("none", "standard"), default="none")
    p.set_defaults(func=_cmd_hypotheses)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
