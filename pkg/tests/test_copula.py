import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from spsurv.copula import (COPULA_MODELS, CopulaCorrelation, CopulaParams, DdpState,
                           PiecewiseExpBaseline, clamp_scores, copula_loglik, copula_survival,
                           exponential_ph_fit, impute_censored, lddpm_eval, lddpm_inverse,
                           lddpm_log, normal_scores, pe_cutpoints, pe_eval, pe_inverse,
                           run_copula, stick_break, truncated_conditional_draws)
from spsurv.errors import ValidationError
from spsurv.mcmc import ChainConfig
from spsurv.simulate import simulate_copula


class TestCopulaLoglik:
    def test_single_location(self):
        R = CopulaCorrelation(np.zeros((1, 2)), CopulaParams(0.7, 2.0))
        assert abs(copula_loglik(np.array([1.3]), R, np.array([-2.0])) + 2.0) < 1e-12

    def test_bivariate_closed_form(self):
        coords = np.array([[0.0, 0.0], [0.3, 0.4]])
        params = CopulaParams(0.6, 2.0)
        rho = 0.6 * np.exp(-2.0 * 0.5)
        z = np.array([0.4, -1.1])
        oracle = (-0.5 * np.log(1 - rho ** 2)
                  - (rho ** 2 * (z @ z) - 2 * rho * z[0] * z[1]) / (2 * (1 - rho ** 2)))
        got = copula_loglik(z, CopulaCorrelation(coords, params), np.zeros(2))
        assert abs(got - oracle) < 1e-10

    def test_dense_matrix_argument(self, rng):
        coords = rng.uniform(size=(6, 2))
        params = CopulaParams(0.5, 3.0)
        z = rng.standard_normal(6)
        a = copula_loglik(z, params.matrix(coords), np.zeros(6))
        b = copula_loglik(z, CopulaCorrelation(coords, params), np.zeros(6))
        assert abs(a - b) < 1e-10

    def test_clamping_warns(self):
        R = CopulaCorrelation(np.zeros((2, 2)) + [[0, 0], [1, 1]], CopulaParams(0.0, 1.0))
        with pytest.warns(RuntimeWarning, match="clamped"):
            val = copula_loglik(np.array([np.inf, 0.0]), R, np.zeros(2))
        assert val == 0.0

    def test_clamp_counter(self):
        z, k = clamp_scores(np.array([-9.0, 0.0, 12.0]))
        np.testing.assert_array_equal(z, [-8.0, 0.0, 8.0])
        assert k == 2

    def test_normal_scores_tails(self):
        lS = np.array([np.log(0.5), np.log(1e-300)])
        lF = np.log(-np.expm1(lS))
        z = normal_scores(lS, lF)
        assert z[0] == 0.0
        assert abs(z[1] - (-special.ndtri(1e-300))) < 1e-12

    def test_parameter_range(self):
        with pytest.raises(ValidationError):
            CopulaParams(1.2, 1.0)
        with pytest.raises(ValidationError):
            CopulaParams(0.5, 0.0)

    def test_fsa_branch_close_to_dense(self, rng):
        coords = rng.uniform(size=(40, 2))
        params = CopulaParams(0.8, 3.0)
        fsa = CopulaCorrelation(coords, params, fsa_threshold=10, K=40, rng=rng)
        dense = CopulaCorrelation(coords, params)
        assert fsa.kind == "fsa" and dense.kind == "dense"
        z = rng.standard_normal(40)
        assert abs(fsa.quad(z) - dense.quad(z)) < 1e-6 * (1 + dense.quad(z))
        assert abs(fsa.logdet - dense.logdet) < 1e-6


class TestPiecewiseExponential:
    def test_cutpoints_match_quantiles(self, rng):
        t = rng.exponential(size=57)
        d = pe_cutpoints(t, 5)
        np.testing.assert_allclose(d[1:-1], np.quantile(t, [0.2, 0.4, 0.6, 0.8]), rtol=1e-15)
        assert d[0] == 0.0 and np.isinf(d[-1])

    def test_one_interval(self):
        np.testing.assert_array_equal(pe_cutpoints([1.0, 2.0], 1), [0.0, np.inf])

    def test_ties_reduce_intervals(self):
        with pytest.warns(RuntimeWarning, match="tied"):
            d = pe_cutpoints(np.ones(20), 4)
        np.testing.assert_array_equal(d, [0.0, 1.0, np.inf])

    def test_cumulative_hazard_example(self):
        bl = PiecewiseExpBaseline([0.0, 1.0, np.inf], [1.0, 2.0])
        Lam, lam = bl.cumulative_hazard(1.5)
        assert Lam == 2.0 and lam == 2.0

    def test_single_interval_is_exponential(self):
        bl = PiecewiseExpBaseline([0.0, np.inf], [0.7])
        t = np.array([0.1, 1.0, 5.0])
        F, f = pe_eval(bl, 0.4, t)
        rate = 0.7 * np.exp(0.4)
        np.testing.assert_allclose(F, stats.expon.cdf(t, scale=1 / rate), rtol=1e-13)
        np.testing.assert_allclose(f, stats.expon.pdf(t, scale=1 / rate), rtol=1e-13)

    def test_continuous_and_differentiable(self):
        bl = PiecewiseExpBaseline([0.0, 1.0, 2.5, np.inf], [0.5, 1.5, 0.8])
        F_left, _ = pe_eval(bl, 0.2, 1.0 - 1e-12)
        F_right, _ = pe_eval(bl, 0.2, 1.0 + 1e-12)
        assert abs(F_left - F_right) < 1e-10
        t = np.array([0.5, 1.7, 3.0])
        h = 1e-6
        _, f = pe_eval(bl, 0.2, t)
        dF = (pe_eval(bl, 0.2, t + h)[0] - pe_eval(bl, 0.2, t - h)[0]) / (2 * h)
        np.testing.assert_allclose(dF, f, rtol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-4, 4), st.floats(-1, 1))
    def test_inverse_round_trip(self, z, eta):
        bl = PiecewiseExpBaseline([0.0, 1.0, 2.5, np.inf], [0.5, 1.5, 0.8])
        t = pe_inverse(bl, eta, z)
        F, _ = pe_eval(bl, eta, t)
        assert abs(special.ndtri(F) - z) < 1e-6

    def test_nonpositive_time(self):
        with pytest.raises(ValidationError):
            pe_eval(PiecewiseExpBaseline([0.0, np.inf], [1.0]), 0.0, 0.0)

    def test_exponential_fit_recovers_rate(self, rng):
        n = 4000
        X = rng.standard_normal((n, 1))
        t = rng.exponential(1.0 / (0.5 * np.exp(0.7 * X[:, 0])))
        h, beta, cov = exponential_ph_fit(t, np.ones(n), X)
        assert abs(h - 0.5) < 0.05
        assert abs(beta[0] - 0.7) < 0.05
        assert cov.shape == (2, 2)


class TestLddpm:
    def test_stick_break_example(self):
        np.testing.assert_allclose(stick_break([0.5, 0.5, 1.0]), [0.5, 0.25, 0.25], rtol=1e-15)
        np.testing.assert_array_equal(stick_break([0.3]), [1.0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(1e-12, 1 - 1e-12), min_size=1, max_size=12))
    def test_stick_break_is_simplex(self, V):
        w = stick_break(V + [1.0])
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-14

    def test_single_atom_is_lognormal(self):
        st_ = DdpState([1.0], [[0.2, 0.5]], [0.49])
        t = np.array([0.3, 1.0, 4.0])
        F, f = lddpm_eval(st_, np.tile([1.0], (3, 1)), t)
        dist = stats.lognorm(s=0.7, scale=np.exp(0.7))
        np.testing.assert_allclose(F, dist.cdf(t), rtol=1e-12)
        np.testing.assert_allclose(f, dist.pdf(t), rtol=1e-12)

    def test_equal_atoms_collapse(self):
        two = DdpState([0.4, 1.0], [[0.1, 0.3], [0.1, 0.3]], [0.8, 0.8])
        one = DdpState([1.0], [[0.1, 0.3]], [0.8])
        t = np.array([0.5, 2.0])
        x = np.array([[0.7], [0.7]])
        np.testing.assert_allclose(lddpm_eval(two, x, t), lddpm_eval(one, x, t), rtol=1e-14)

    def test_two_atoms_hand_sum(self):
        st_ = DdpState([0.3, 1.0], [[0.0, 1.0], [1.0, -0.5]], [0.5, 2.0])
        x, t = 0.4, 1.7
        w = (0.3, 0.7)
        loc = (0.0 + 1.0 * x, 1.0 - 0.5 * x)
        sd = (np.sqrt(0.5), np.sqrt(2.0))
        y = np.log(t)
        F_hand = sum(wk * stats.norm.cdf((y - m) / s) for wk, m, s in zip(w, loc, sd))
        f_hand = sum(wk * stats.norm.pdf((y - m) / s) / (s * t) for wk, m, s in zip(w, loc, sd))
        F, f = lddpm_eval(st_, [[x]], t)
        assert abs(F[0] - F_hand) < 1e-14
        assert abs(f[0] - f_hand) < 1e-14

    def test_permutation_invariance(self):
        a = DdpState([0.3, 1.0], [[0.0, 1.0], [1.0, -0.5]], [0.5, 2.0])
        b = DdpState([0.7, 1.0], [[1.0, -0.5], [0.0, 1.0]], [2.0, 0.5])
        x = np.array([[0.2], [0.2]])
        np.testing.assert_allclose(lddpm_eval(a, x, [0.5, 3.0]), lddpm_eval(b, x, [0.5, 3.0]),
                                   rtol=1e-12)

    def test_inverse_round_trip(self, rng):
        st_ = DdpState([0.3, 0.5, 1.0], rng.standard_normal((3, 2)), [0.3, 1.0, 0.6])
        z = np.array([-3.0, -0.5, 0.0, 1.2, 4.0])
        x = np.tile([0.3], (5, 1))
        t = lddpm_inverse(st_, x, z)
        lS, lF, _ = lddpm_log(st_, x, t)
        np.testing.assert_allclose(normal_scores(lS, lF), z, atol=1e-6)

    def test_invalid_sticks(self):
        with pytest.raises(ValidationError):
            DdpState([1.2, 1.0], np.zeros((2, 1)), [1.0, 1.0])


class TestImputation:
    def test_independent_draws_exceed_bound(self, rng):
        z = truncated_conditional_draws(np.zeros(3), [0.5, 2.0, 9.0], [0, 1, 2], rng)
        assert np.all(z > [0.5, 2.0, 9.0])

    def test_independent_matches_truncated_normal(self, rng):
        lo = 0.7
        draws = np.array([truncated_conditional_draws(np.zeros(1), [lo], [0], rng)[0]
                          for _ in range(10000)])
        assert stats.kstest(draws, stats.truncnorm(lo, np.inf).cdf).statistic < 0.02

    def test_conditional_on_neighbor(self, rng):
        rho = 0.8
        P = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))
        draws = np.array([truncated_conditional_draws([0.0, 1.5], [-np.inf], [0], rng, P)[0]
                          for _ in range(8000)])
        assert abs(draws.mean() - rho * 1.5) < 0.03
        assert abs(draws.var() - (1 - rho ** 2)) < 0.03

    def test_imputed_times_exceed_censoring(self, rng):
        bl = PiecewiseExpBaseline([0.0, np.inf], [1.0])
        t_obs = np.array([0.5, 2.0, 30.0])
        lower = special.ndtri(pe_eval(bl, 0.0, t_obs)[0])
        z, t = impute_censored(np.zeros(3), t_obs.copy(), t_obs, [0, 1, 2], lower,
                               lambda zs, idx: pe_inverse(bl, 0.0, zs), rng)
        assert np.all(t > t_obs)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(21)
    ds, _ = simulate_copula(40, [0.5], 0.6, 5.0, rng, censor_rate=0.2)
    return ds


class TestSamplers:
    @pytest.mark.parametrize("model", COPULA_MODELS)
    def test_short_run(self, data, model):
        cfg = ChainConfig(nburn=60, nsave=30, nskip=0, ndisplay=0, seed=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            chain = run_copula(data, cfg, model)
        assert chain.nsave == 30 and chain.loglik.shape == (30, data.n)
        assert np.all(np.isfinite(chain.loglik))
        assert all(0 <= r <= 1 for r in chain.acceptance.values())
        if model.startswith("copula"):
            assert np.all((chain["theta1"] >= 0) & (chain["theta1"] <= 1))
        S = copula_survival(chain, np.array([0.0]), [0.5, 1.0, 2.0], draws=[0, 29])
        assert S.shape == (2, 3)
        assert np.all(np.diff(S, axis=1) <= 1e-12)

    def test_rejects_interval_censoring(self, data):
        from dataclasses import replace
        bad = replace(data, b=np.where(np.isinf(data.b), data.a + 1.0, data.b))
        with pytest.raises(ValidationError, match="right-censored"):
            run_copula(bad, ChainConfig(nburn=1, nsave=1, ndisplay=0), "copula-coxph")

    def test_unknown_model(self, data):
        with pytest.raises(ValidationError):
            run_copula(data, ChainConfig(nburn=1, nsave=1, ndisplay=0), "copula-foo")
