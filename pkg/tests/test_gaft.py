import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from spsurv.errors import ValidationError
from spsurv.gaft import (GaftPriors, LdtfpState, gaft_bayes_factors, gaft_log_likelihood,
                         gaft_survival, ldtfp_eval, ldtfp_log_prior, ldtfp_partition_index,
                         ldtfp_prob, node_index, run_gaft)
from spsurv.mcmc import ChainConfig
from spsurv.survdata import SurvDataset


def _random_state(rng, L=3, q=1, scale=1.0, sigma2=0.8):
    st_ = LdtfpState.zero(L, q, sigma2=sigma2)
    st_.gamma[1:] = scale * rng.standard_normal((2 ** L - 2, q + 1))
    return st_


class TestPartitionIndex:
    def test_zero_is_middle(self):
        assert ldtfp_partition_index(1.3, 0.0, 4) == 8

    def test_tails(self):
        np.testing.assert_array_equal(ldtfp_partition_index(1.0, [-np.inf, np.inf], 3), [1, 8])

    def test_example(self):
        assert ldtfp_partition_index(1.0, special.ndtri(0.3), 2) == 2

    def test_sigma_positive(self):
        with pytest.raises(ValidationError):
            ldtfp_partition_index(0.0, 0.0, 2)


class TestLeafProbabilities:
    def test_zero_tree_is_uniform(self):
        st_ = LdtfpState.zero(3, 2)
        np.testing.assert_allclose(ldtfp_prob(np.arange(1, 9), [0.3, -1.0], st_), 1 / 8,
                                   rtol=1e-15)

    def test_depth_one(self):
        assert ldtfp_prob(1, [], LdtfpState.zero(1, 0)) == 0.5

    def test_logistic_split(self):
        st_ = LdtfpState.zero(2, 0)
        st_.gamma[node_index(1, 1), 0] = np.log(3.0)
        assert abs(ldtfp_prob(1, [], st_) - 0.375) < 1e-15

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2 ** 31))
    def test_sum_to_one(self, L, seed):
        rng = np.random.default_rng(seed)
        st_ = _random_state(rng, L=L, scale=2.0)
        p = ldtfp_prob(np.arange(1, 2 ** L + 1), rng.standard_normal(1), st_)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_root_must_be_zero(self):
        with pytest.raises(ValidationError):
            LdtfpState(2, 1.0, 1.0, np.ones((3, 1)), np.zeros(1))


class TestLdtfpEval:
    def test_zero_tree_is_normal(self):
        e = np.linspace(-3, 3, 13)
        f, G = ldtfp_eval(LdtfpState.zero(4, 0, sigma2=2.0), [], e)
        np.testing.assert_allclose(f, stats.norm.pdf(e, scale=np.sqrt(2.0)), rtol=1e-12)
        np.testing.assert_allclose(G, stats.norm.cdf(e, scale=np.sqrt(2.0)), rtol=1e-12)

    def test_median_zero(self, rng):
        for _ in range(5):
            _, G = ldtfp_eval(_random_state(rng, scale=2.0), rng.standard_normal(1), 0.0)
            assert abs(G[0] - 0.5) < 1e-14

    def test_density_integrates_to_one(self, rng):
        st_ = _random_state(rng, L=3, scale=1.5)
        z = [0.7]
        edges = st_.sigma * special.ndtri(np.arange(1, 8) / 8)
        pieces = np.concatenate([[-np.inf], edges, [np.inf]])
        mass = sum(integrate.quad(lambda e: ldtfp_eval(st_, z, e)[0][0], lo, hi)[0]
                   for lo, hi in zip(pieces[:-1], pieces[1:]))
        assert abs(mass - 1.0) < 1e-6

    def test_cdf_at_partition_edges(self, rng):
        st_ = _random_state(rng, L=3, scale=1.5)
        z = [-0.4]
        k = np.arange(1, 8)
        edges = st_.sigma * special.ndtri(k / 8)
        _, G = ldtfp_eval(st_, z, edges)
        p = ldtfp_prob(np.arange(1, 9), z, st_)
        np.testing.assert_allclose(G, np.cumsum(p)[:7], atol=1e-12)

    def test_finite_difference(self, rng):
        st_ = _random_state(rng, L=3)
        e = np.array([-1.1, -0.2, 0.45, 1.7])
        h = 1e-6
        f, _ = ldtfp_eval(st_, [0.2], e)
        _, Gp = ldtfp_eval(st_, [0.2], e + h)
        _, Gm = ldtfp_eval(st_, [0.2], e - h)
        np.testing.assert_allclose((Gp - Gm) / (2 * h), f, rtol=1e-6)


class TestPrior:
    def _state(self, rng, alpha=1.0):
        st_ = _random_state(rng, L=3, q=1)
        st_.alpha = alpha
        st_.ZtZ = np.array([[50.0, 2.0], [2.0, 40.0]])
        st_.n = 50
        return st_

    def test_matches_gaussian_oracle(self, rng):
        st_ = self._state(rng)
        Sinv = np.linalg.inv(st_.ZtZ)
        oracle = 0.0
        for j in range(1, 3):
            c = 2.0 * st_.n / (st_.alpha * (j + 1) ** 2)
            for k in range(1, 2 ** j + 1):
                oracle += stats.multivariate_normal(np.zeros(2), c * Sinv).logpdf(
                    st_.gamma[node_index(j, k)])
        assert abs(ldtfp_log_prior(st_) - oracle) < 1e-10

    def test_singular_design(self, rng):
        st_ = self._state(rng)
        st_.ZtZ = np.ones((2, 2))
        with pytest.raises(ValidationError):
            ldtfp_log_prior(st_)

    def test_reference_defaults(self):
        pr = GaftPriors.reference_defaults()
        assert (pr.L, pr.a0, pr.b0) == (4, 5.0, 1.0)

    def test_needs_design(self):
        with pytest.raises(ValidationError):
            ldtfp_log_prior(LdtfpState.zero(2, 0))


def _gaft_data(rng, n=80):
    X = rng.standard_normal((n, 1))
    t = np.exp(0.5 + 0.8 * X[:, 0] + 0.7 * rng.standard_normal(n))
    c = np.exp(rng.normal(1.5, 1.0, n))
    a = np.minimum(t, c)
    b = np.where(t <= c, a, np.inf)
    return SurvDataset(u=np.zeros(n), a=a, b=b, X=X, unit=np.zeros(n, dtype=int),
                       covariate_names=["x"], Z=X.copy(), baseline_names=["x"])


class TestLikelihood:
    def test_density_of_time_integrates_to_one(self, rng):
        st_ = _random_state(rng, L=2, q=0)
        st_.beta = np.array([0.3])
        # Integrate over log t, where the density of t times t is f(log t - mu).
        edges = 0.3 + st_.sigma * special.ndtri(np.arange(1, 4) / 4)
        pieces = np.concatenate([[-np.inf], edges, [np.inf]])
        mass = sum(integrate.quad(lambda y: ldtfp_eval(st_, [], y - 0.3)[0][0], lo, hi)[0]
                   for lo, hi in zip(pieces[:-1], pieces[1:]))
        assert abs(mass - 1.0) < 1e-6

    def test_survival_complements_cdf(self, rng):
        st_ = _random_state(rng, L=2, q=0)
        st_.beta = np.array([0.1])
        t = np.array([0.5, 1.0, 4.0])
        _, G = ldtfp_eval(st_, [], np.log(t) - 0.1)
        np.testing.assert_allclose(gaft_survival(st_, [], [], t), 1.0 - G, rtol=1e-12)

    def test_intercept_required(self, rng):
        ds = _gaft_data(rng)
        with pytest.raises(ValidationError):
            gaft_log_likelihood(ds, LdtfpState.zero(2, 1, beta=np.zeros(1)))


@pytest.fixture(scope="module")
def chain():
    ds = _gaft_data(np.random.default_rng(5))
    cfg = ChainConfig(nburn=300, nsave=200, nskip=0, ndisplay=0, seed=9)
    return ds, run_gaft(ds, cfg, GaftPriors(L=3))


class TestSampler:
    def test_shapes(self, chain):
        ds, ch = chain
        assert ch["gamma"].shape == (200, 7, 2)
        assert ch["beta"].shape == (200, 2)
        np.testing.assert_array_equal(ch["gamma"][:, 0], 0.0)
        assert ch.loglik.shape == (200, ds.n)

    def test_slope_recovered(self, chain):
        _, ch = chain
        assert abs(ch["beta"][:, 1].mean() - 0.8) < 0.3

    def test_bayes_factor_keys(self, chain):
        ds, ch = chain
        Zt = np.column_stack([np.ones(ds.n), ds.Z - ds.Z.mean(0)])
        bf = gaft_bayes_factors(ch["gamma"], float(ch["alpha"].mean()), Zt.T @ Zt, ds.n, 3,
                                names=["x"])
        assert set(bf) == {"x", "overall", "normality"}
        assert all(v > 0 for v in bf.values())


class TestBayesFactors:
    # The ratio prior(0) / posterior(0) is small when the data favor H0.
    def test_concentrated_at_zero_favors_null(self, rng):
        draws = 1e-4 * rng.standard_normal((400, 3, 1))
        draws[:, 0] = 0.0
        bf = gaft_bayes_factors(draws, 1.0, np.array([[100.0]]), 100, 2)
        assert bf["normality"] < 1e-3

    def test_far_from_zero_favors_alternative(self, rng):
        draws = 5.0 + 0.1 * rng.standard_normal((400, 3, 1))
        draws[:, 0] = 0.0
        bf = gaft_bayes_factors(draws, 1.0, np.array([[100.0]]), 100, 2)
        assert bf["normality"] > 1e3

    def test_matches_hand_computation(self, rng):
        n, alpha = 100, 2.0
        draws = rng.normal(0.3, 0.5, size=(300, 3, 1))
        draws[:, 0] = 0.0
        c = 2.0 * n / (alpha * 4.0)
        num = 2 * stats.norm.logpdf(0.0, scale=np.sqrt(c / 50.0))
        U = draws[:, 1:, 0]
        den = stats.multivariate_normal(U.mean(0), np.cov(U.T)).logpdf(np.zeros(2))
        bf = gaft_bayes_factors(draws, alpha, np.array([[50.0]]), n, 2)
        assert abs(np.log(bf["normality"]) - (num - den)) < 1e-10

    def test_singular_posterior_gets_ridge(self):
        draws = np.zeros((6, 3, 1))
        draws[:, 1:, 0] = np.array([[1.0, 1.0], [-1.0, -1.0]] * 3)
        with pytest.warns(RuntimeWarning, match="ridge"):
            bf = gaft_bayes_factors(draws, 1.0, np.array([[100.0]]), 100, 2)
        assert np.isfinite(bf["normality"])

    def test_too_few_draws(self, rng):
        with pytest.raises(ValidationError):
            gaft_bayes_factors(rng.standard_normal((3, 3, 1)), 1.0, np.array([[10.0]]), 10, 2)

    def test_depth_one(self, rng):
        with pytest.raises(ValidationError):
            gaft_bayes_factors(rng.standard_normal((10, 1, 1)), 1.0, np.array([[10.0]]), 10, 1)
