import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln, logsumexp

from ordgene.errors import NumericalError, ValidationError
from ordgene.hypspace import enumerate_hypotheses
from ordgene.model import ExpressionDataset, GlobalParams, PriorConfig
from ordgene.sampler import (
    ChainState,
    SamplerConfig,
    _categorical_rows,
    _log_dirichlet_draw,
    convergence_report,
    fixed_params_visit_frequencies,
    initial_state,
    mh_update_global,
    order_key_for_chain,
    param_names,
    run_chain,
    run_chains,
    sample_assignment,
    sample_mixture_weights,
    split_rhat,
    substream,
)
from ordgene.simulate import exact_posterior_small, generate_dataset

from conftest import philox
from oracles import null_marginal_quadrature


class TestStreams:
    def test_substream_reproducible(self):
        a = substream(7, 0, 3, 12).random(5)
        b = substream(7, 0, 3, 12).random(5)
        np.testing.assert_array_equal(a, b)

    def test_substream_distinct_paths(self):
        a = substream(7, 0, 3, 12).random(5)
        b = substream(7, 0, 3, 13).random(5)
        c = substream(7, 1, 3, 12).random(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_order_key_stable_and_per_chain(self):
        k0 = order_key_for_chain(5, 0)
        k0b = order_key_for_chain(5, 0)
        k1 = order_key_for_chain(5, 1)
        assert np.random.Generator(np.random.Philox(k0)).random(4).tolist() == (
            np.random.Generator(np.random.Philox(k0b)).random(4).tolist()
        )
        assert not np.array_equal(
            np.random.Generator(np.random.Philox(k0)).random(4),
            np.random.Generator(np.random.Philox(k1)).random(4),
        )

    def test_param_names(self):
        assert param_names(2) == ("alpha_1", "alpha_2", "alpha_0", "mu_0")


class TestConfig:
    def test_num_retained(self):
        assert SamplerConfig(num_iterations=20, burn_in=5).num_retained == 15
        assert SamplerConfig(num_iterations=20, burn_in=5,
                             thinning=7).num_retained == 3

    def test_adapt_until_defaults_to_burn_in(self):
        cfg = SamplerConfig(num_iterations=50, burn_in=12)
        assert cfg.adapt_until == 12

    @pytest.mark.parametrize("kw", [
        dict(num_chains=0),
        dict(num_iterations=0),
        dict(num_iterations=10, burn_in=10),
        dict(thinning=0),
        dict(d_factor_samples=0),
        dict(master_seed=-1),
        dict(num_iterations=10, burn_in=2, adapt_until=11),
        dict(initial_step=0.0),
        dict(target_accept=1.0),
    ])
    def test_validation(self, kw):
        with pytest.raises(ValidationError):
            SamplerConfig(**kw)


class TestMixtureWeights:
    def test_log_draw_normalized_and_finite_at_tiny_weight(self):
        rng = philox(101)
        conc = np.full(4, 0.001)
        for _ in range(200):
            lw = _log_dirichlet_draw(conc, rng)
            assert np.all(lw < np.inf) and not np.any(np.isnan(lw))
            assert abs(logsumexp(lw)) < 1e-10

    def test_moderate_marginal_matches_beta(self):
        rng = philox(103)
        draws = np.array([
            sample_mixture_weights(np.array([1.0, 1.0]), 1.0, rng)[0]
            for _ in range(4000)
        ])
        # Dirichlet(2, 2) first coordinate is Beta(2, 2)
        assert stats.kstest(draws, stats.beta(2, 2).cdf).pvalue > 1e-3

    def test_posterior_mean_with_counts(self):
        rng = philox(107)
        draws = np.array([
            sample_mixture_weights(np.array([3.0, 1.0]), 1.0, rng)
            for _ in range(20_000)
        ])
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
        se = np.sqrt(stats.beta(4, 2).var() / 20_000)
        assert abs(draws[:, 0].mean() - 4.0 / 6.0) < 3 * se

    def test_tiny_weight_symmetry(self):
        rng = philox(109)
        n = 10_000
        draws = np.array([
            sample_mixture_weights(np.zeros(3), 0.001, rng) for _ in range(n)
        ])
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
        assert not np.any(np.isnan(draws))
        top = draws.argmax(axis=1)
        freqs = np.bincount(top, minlength=3) / n
        assert np.all(np.abs(freqs - 1.0 / 3.0) < 3 * np.sqrt(2.0 / 9.0 / n))
        sd = np.sqrt(stats.beta(0.001, 0.002).var())
        assert np.all(np.abs(draws.mean(axis=0) - 1.0 / 3.0) < 3 * sd / np.sqrt(n))

    def test_validation(self):
        rng = philox(1)
        with pytest.raises(ValidationError):
            sample_mixture_weights(np.array([-1.0, 2.0]), 0.1, rng)
        with pytest.raises(ValidationError):
            sample_mixture_weights(np.array([1.0, 2.0]), 0.0, rng)


class TestCategorical:
    def test_inverse_cdf_semantics(self):
        lp = np.log(np.array([[0.2, 0.3, 0.5]]))
        assert _categorical_rows(lp, np.array([0.1]))[0] == 0
        assert _categorical_rows(lp, np.array([0.45]))[0] == 1
        assert _categorical_rows(lp, np.array([0.95]))[0] == 2

    def test_minus_inf_entries_skipped(self):
        lp = np.array([[-np.inf, 0.0, -np.inf]])
        for u in (0.01, 0.5, 0.99):
            assert _categorical_rows(lp, np.array([u]))[0] == 1

    def test_all_minus_inf_raises(self):
        with pytest.raises(NumericalError):
            _categorical_rows(np.full((2, 3), -np.inf), np.array([0.5, 0.5]))

    def test_frequencies_match_probabilities(self):
        rng = philox(113)
        p = np.array([0.15, 0.6, 0.25])
        lp = np.tile(np.log(p), (2000, 1)) + 3.7   # unnormalized
        z = np.concatenate([
            _categorical_rows(lp, rng.random(2000)) for _ in range(5)
        ])
        freqs = np.bincount(z, minlength=3) / z.size
        assert np.all(np.abs(freqs - p) < 3 * np.sqrt(p * (1 - p) / z.size))


class TestAssignment:
    def test_matches_exact_posterior(self, dataset_s2, params_s2):
        sub = ExpressionDataset(dataset_s2.values[:1], [dataset_s2.gene_ids[0]])
        exact = exact_posterior_small(sub, params_s2)[0]
        rng = philox(127)
        n, mc = 800, 2048
        z = np.array([
            sample_assignment(sub.values[0], params_s2, rng, mc_samples=mc,
                              order_key=9)
            for _ in range(n)
        ])
        freqs = np.bincount(z, minlength=3) / n
        # 3 sigma multinomial noise plus a margin for the fixed-stream
        # Monte Carlo order factors inside the sampled conditional
        tol = 3 * np.sqrt(exact * (1 - exact) / n) + 0.03
        assert np.all(np.abs(freqs - exact) < tol)

    def test_requires_weights(self, dataset_s2, params_s2):
        bare = GlobalParams(params_s2.state_shapes, params_s2.prior_shape,
                            params_s2.prior_mean_scale)
        with pytest.raises(ValidationError):
            sample_assignment(dataset_s2.values[0], bare, philox(1))


class _StubRng:
    """Fixed-outcome stand-in for the two draws one update consumes."""

    def __init__(self, eps, u):
        self.eps, self.u = eps, u

    def standard_normal(self):
        return self.eps

    def random(self):
        return self.u


def _scalar_state(value):
    params = GlobalParams(np.array([1.0]), 1.0, value)
    return ChainState(params, np.zeros(1, dtype=np.int64), np.full(3, 0.8))


class TestMetropolis:
    def test_stationary_distribution(self):
        # unnormalized Gamma(3, scale=2); the kernel must preserve it
        target = lambda v: 2.0 * math.log(v) - 0.5 * v
        state = _scalar_state(1.0)
        rng = philox(131)
        draws = []
        for t in range(25_000):
            val, _ = mh_update_global("mu_0", state, None, rng,
                                      log_target=target)
            if t >= 1000 and t % 8 == 0:
                draws.append(val)
        draws = np.asarray(draws)
        ref = stats.gamma(3, scale=2)
        assert stats.kstest(draws, ref.cdf).pvalue > 1e-3
        # the log-scale Jacobian matters: without it the chain would sit
        # on Gamma(4, 2) instead, which this sample must reject
        assert stats.kstest(draws, stats.gamma(4, scale=2).cdf).pvalue < 1e-8

    def test_acceptance_updates_state(self):
        state = _scalar_state(2.0)
        target = lambda v: 0.0   # flat: only the Jacobian steers it
        val, acc = mh_update_global("mu_0", state, None,
                                    _StubRng(0.5, 1e-12), log_target=target)
        assert acc and val == pytest.approx(2.0 * math.exp(0.4))
        assert state.param_value("mu_0") == pytest.approx(val)

    def test_rejection_keeps_state(self):
        state = _scalar_state(2.0)
        # log ratio = log(w/v) = 0.8 * -3 -> needs log(u) < -2.4
        val, acc = mh_update_global("mu_0", state, None,
                                    _StubRng(-3.0, 0.99), log_target=lambda v: 0.0)
        assert not acc and val == 2.0
        assert state.param_value("mu_0") == 2.0

    def test_proposals_beyond_upper_bound_rejected(self):
        state = _scalar_state(9000.0)
        val, acc = mh_update_global(
            "mu_0", state, None, _StubRng(4.0, 1e-12),
            prior=PriorConfig(), log_target=lambda v: 0.0,
        )
        assert not acc and val == 9000.0

    def test_unknown_parameter(self):
        with pytest.raises(ValidationError):
            mh_update_global("beta_3", _scalar_state(1.0), None, philox(1),
                             log_target=lambda v: 0.0)


class TestInitialState:
    def test_moment_matching_start(self):
        rng = philox(137)
        truth = GlobalParams(np.array([12.0, 12.0]), 4.0, 3.0, np.array([1.0, 0, 0]))
        ds, _ = generate_dataset(truth, 60, 40, rng)
        cfg = SamplerConfig(num_iterations=10, burn_in=2)
        st = initial_state(ds, cfg, 0, 3)
        # method-of-moments per gene, median across genes: loose but sane
        assert np.all((st.params.state_shapes > 4) & (st.params.state_shapes < 30))
        assert st.params.prior_mean_scale == pytest.approx(ds.values.mean())
        assert st.params.prior_shape == 2.0
        np.testing.assert_array_equal(st.assignments, 0)
        np.testing.assert_array_equal(st.step_sizes, cfg.initial_step)
        np.testing.assert_allclose(st.params.mixture_weights, 1.0 / 3.0)

    def test_degenerate_data_clipped(self):
        ds = ExpressionDataset(np.full((3, 2, 4), 5.0))
        cfg = SamplerConfig(num_iterations=10, burn_in=2)
        st = initial_state(ds, cfg, 0, 3)
        assert np.all(np.isfinite(st.params.state_shapes))
        np.testing.assert_array_equal(st.params.state_shapes, 1.0)

    def test_single_individual_defaults(self):
        ds = ExpressionDataset(np.ones((3, 2, 1)) + np.arange(6).reshape(3, 2, 1))
        st = initial_state(ds, SamplerConfig(num_iterations=5, burn_in=1), 0, 3)
        np.testing.assert_array_equal(st.params.state_shapes, 1.0)


def _small_config(**kw):
    base = dict(num_chains=2, num_iterations=60, burn_in=20, thinning=2,
                d_factor_samples=64, master_seed=42)
    base.update(kw)
    return SamplerConfig(**base)


class TestRunChain:
    def test_bookkeeping(self, dataset_s2):
        cfg = _small_config()
        tr = run_chain(dataset_s2, cfg, 0)
        R = cfg.num_retained
        assert tr.alpha.shape == (R, 2)
        assert tr.phi.shape == (R, 3)
        assert tr.visit_counts.shape == (6, 3)
        np.testing.assert_array_equal(tr.visit_counts.sum(axis=1), R)
        np.testing.assert_allclose(tr.phi.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((tr.accept_rates >= 0) & (tr.accept_rates <= 1))
        assert np.all(tr.alpha > 0) and np.all(tr.mu0 > 0) and np.all(tr.alpha0 > 0)
        assert tr.burn_in == 20 and tr.thinning == 2
        np.testing.assert_array_equal(tr.param_draws("alpha_2"), tr.alpha[:, 1])
        with pytest.raises(ValidationError):
            tr.param_draws("gamma_1")

    def test_rerun_bit_identical(self, dataset_s2):
        cfg = _small_config()
        a = run_chain(dataset_s2, cfg, 1)
        b = run_chain(dataset_s2, cfg, 1)
        np.testing.assert_array_equal(a.alpha, b.alpha)
        np.testing.assert_array_equal(a.phi, b.phi)
        np.testing.assert_array_equal(a.visit_counts, b.visit_counts)
        np.testing.assert_array_equal(a.accept_rates, b.accept_rates)

    def test_chains_differ(self, dataset_s2):
        cfg = _small_config()
        a = run_chain(dataset_s2, cfg, 0)
        b = run_chain(dataset_s2, cfg, 1)
        assert not np.array_equal(a.alpha, b.alpha)

    def test_worker_count_invisible(self, dataset_s2):
        cfg = _small_config()
        solo, rep1 = run_chains(dataset_s2, cfg, workers=1)
        pooled, rep2 = run_chains(dataset_s2, cfg, workers=2)
        assert [t.chain_index for t in pooled] == [0, 1]
        for a, b in zip(solo, pooled):
            np.testing.assert_array_equal(a.alpha, b.alpha)
            np.testing.assert_array_equal(a.phi, b.phi)
            np.testing.assert_array_equal(a.visit_counts, b.visit_counts)
        assert rep1.rhat == rep2.rhat
        with pytest.raises(ValidationError):
            run_chains(dataset_s2, cfg, workers=0)

    def test_step_sizes_frozen_after_adaptation(self, dataset_s2):
        # acceptance tallies only cover iterations after both burn-in and
        # adaptation have ended
        cfg = _small_config(num_iterations=50, burn_in=10, adapt_until=30)
        tr = run_chain(dataset_s2, cfg, 0)
        assert np.all(tr.accept_rates <= 1.0)


@pytest.fixture(scope="module")
def grid_problem():
    truth = GlobalParams(np.array([6.0]), 4.0, 2.0, np.array([1.0]))
    ds, _ = generate_dataset(truth, 6, 6, philox(139))
    # with six genes the prior shape is weakly identified and its
    # posterior keeps a flat tail all the way to the uniform bound, so
    # that axis is log-spaced over the full support
    al = np.linspace(1.0, 25.0, 90)
    a0 = np.geomspace(0.2, 10_000.0, 160)
    m0 = np.linspace(0.5, 6.0, 90)
    G, _, N = ds.values.shape
    T = ds.values.sum(axis=(1, 2))
    Lsum = float(np.log(ds.values).sum())
    data = G * N * (al * np.log(al) - gammaln(al)) + (al - 1.0) * Lsum
    prior = G * (a0[:, None] * np.log(a0[:, None] * m0[None, :])
                 - gammaln(a0)[:, None])
    A = a0[None, :] + N * al[:, None]
    lp = data[:, None, None] + prior[None, :, :] + G * gammaln(A)[:, :, None]
    for g in range(G):
        B = a0[None, :, None] * m0[None, None, :] + (al * T[g])[:, None, None]
        lp = lp - A[:, :, None] * np.log(B)
    mass = np.exp(lp - lp.max())
    for axis, grid in ((0, al), (1, a0), (2, m0)):
        w = np.gradient(grid)
        shape = [1, 1, 1]
        shape[axis] = grid.size
        mass = mass * w.reshape(shape)
    mass /= mass.sum()
    return ds, al, a0, m0, lp, mass


class TestGridOracle:
    """One-state model: the whole Metropolis sweep against a dense grid.

    With a single state there is exactly one pattern, so assignments and
    weights are degenerate and the posterior over (alpha_1, alpha_0,
    mu_0) is just the product of per-gene collapsed marginals under flat
    priors.  That density is cheap on a grid, and the grid itself is
    anchored to an independent quadrature at spot-checked points.
    """

    def test_grid_matches_quadrature_spot_checks(self, grid_problem):
        ds, al, a0, m0, lp, _ = grid_problem
        for ia, ib, ic in [(20, 30, 45), (50, 10, 60)]:
            ref = sum(
                null_marginal_quadrature(ds.values[g], np.array([al[ia]]),
                                         a0[ib], m0[ic])
                for g in range(ds.num_genes)
            )
            assert lp[ia, ib, ic] == pytest.approx(ref, abs=1e-6)

    def test_grid_captures_posterior_mass(self, grid_problem):
        _, _, _, _, _, mass = grid_problem
        for axis, last_ok in ((0, 1e-4), (1, 0.05), (2, 1e-4)):
            lead = [slice(None)] * 3
            lead[axis] = 0
            assert mass[tuple(lead)].sum() < 1e-4
            tail = [slice(None)] * 3
            tail[axis] = -1
            # the prior-shape axis legitimately ends where the uniform
            # prior truncates, so only require the edge cell be modest
            assert mass[tuple(tail)].sum() < last_ok

    def test_chain_marginals_match_grid(self, grid_problem):
        ds, al, a0, m0, _, mass = grid_problem
        cfg = SamplerConfig(num_chains=1, num_iterations=8000, burn_in=2000,
                            thinning=2, master_seed=7)
        tr = run_chain(ds, cfg, 0)
        checks = [
            (tr.alpha[:, 0], al, mass.sum(axis=(1, 2))),
            (tr.alpha0, a0, mass.sum(axis=(0, 2))),
            (tr.mu0, m0, mass.sum(axis=(0, 1))),
        ]
        for draws, grid, marg in checks:
            # compare on the log scale; the prior-shape marginal is far
            # too heavy-tailed for moment checks on the natural scale
            ld, lg = np.log(draws), np.log(grid)
            mean = np.sum(marg * lg)
            sd = np.sqrt(np.sum(marg * lg**2) - mean**2)
            w = stats.wasserstein_distance(ld, lg, v_weights=marg)
            assert w < 0.3 * sd
            assert abs(ld.mean() - mean) < 0.3 * sd


class TestSplitRhat:
    def test_mixed_chains_near_one(self):
        draws = philox(149).standard_normal((4, 400))
        assert split_rhat(draws) < 1.05

    def test_separated_chains_flagged(self):
        rng = philox(151)
        draws = rng.standard_normal((2, 400)) + np.array([[0.0], [3.0]])
        assert split_rhat(draws) > 1.5

    def test_trending_single_chain_flagged(self):
        drift = np.linspace(0, 5, 400)[None, :]
        assert split_rhat(drift + philox(157).standard_normal((1, 400)) * 0.1) > 1.5

    def test_constant_is_exactly_one(self):
        assert split_rhat(np.full((3, 100), 2.5)) == 1.0

    def test_validation(self):
        with pytest.raises(ValidationError):
            split_rhat(np.ones(10))
        with pytest.raises(ValidationError):
            split_rhat(np.ones((2, 3)))


class TestConvergenceReport:
    def test_two_chain_report(self, dataset_s2):
        traces, rep = run_chains(dataset_s2, _small_config(), workers=1)
        assert rep.available
        assert set(rep.rhat) == set(param_names(2))
        assert rep.worst() == max(rep.rhat.values())
        assert rep.converged == (rep.worst() <= 1.1)

    def test_single_chain_unavailable(self, dataset_s2):
        tr = run_chain(dataset_s2, _small_config(num_chains=1), 0)
        rep = convergence_report([tr])
        assert not rep.available
        assert rep.rhat is None and rep.converged is None
        assert rep.worst() is None

    def test_too_few_draws_unavailable(self, dataset_s2):
        cfg = _small_config(num_iterations=24, burn_in=20, thinning=2)
        traces = [run_chain(dataset_s2, cfg, c) for c in range(2)]
        assert traces[0].num_retained == 2
        assert not convergence_report(traces).available

    def test_empty_traces_rejected(self):
        with pytest.raises(ValidationError):
            convergence_report([])


class TestFixedParamsSweep:
    def test_frequencies_match_exact_posterior(self, dataset_s2, params_s2):
        sub = ExpressionDataset(dataset_s2.values[:3], dataset_s2.gene_ids[:3])
        exact = exact_posterior_small(sub, params_s2)
        n = 3000
        freqs = fixed_params_visit_frequencies(sub, params_s2, n, master_seed=3,
                                               mc_samples=8192, order_key=11)
        np.testing.assert_allclose(freqs.sum(axis=1), 1.0, atol=1e-12)
        tol = 3 * np.sqrt(exact * (1 - exact) / n) + 0.02
        assert np.max(np.abs(freqs - exact)) < np.max(tol)
        assert np.all(np.abs(freqs - exact) < tol)

    def test_deterministic(self, dataset_s2, params_s2):
        f1 = fixed_params_visit_frequencies(dataset_s2, params_s2, 50,
                                            master_seed=5, mc_samples=64)
        f2 = fixed_params_visit_frequencies(dataset_s2, params_s2, 50,
                                            master_seed=5, mc_samples=64)
        np.testing.assert_array_equal(f1, f2)

    def test_validation(self, dataset_s2, params_s2):
        bare = GlobalParams(params_s2.state_shapes, params_s2.prior_shape,
                            params_s2.prior_mean_scale)
        with pytest.raises(ValidationError):
            fixed_params_visit_frequencies(dataset_s2, bare, 10)
        with pytest.raises(ValidationError):
            fixed_params_visit_frequencies(dataset_s2, params_s2, 0)
