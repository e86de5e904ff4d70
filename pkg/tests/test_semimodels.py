import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from spsurv.baseline import CenteringFamily, TbpState, centering_log
from spsurv.errors import NumericalError, ValidationError
from spsurv.semimodels import (CensoredLikelihood, ModelSpec, link_log, link_survival,
                               log_interval_prob, log_likelihood, selection_covariance,
                               selection_g, selection_log_prior)
from spsurv.survdata import SurvDataset

# Log-logistic centering at theta = 0 has S0(1) = 0.5 and f0(1) = 0.25.
LL0 = ("loglogistic", (0.0, 0.0))


class TestLinks:
    @pytest.mark.parametrize("link", ["AFT", "PH", "PO"])
    def test_zero_predictor_is_baseline(self, link):
        t = np.logspace(-2, 2, 25)
        lS, _, lf = link_log(link, None, "weibull", (0.2, -0.1), 0.0, t)
        lS0, _, lf0 = centering_log("weibull", (0.2, -0.1), t)
        np.testing.assert_allclose(lS, lS0, rtol=1e-14)
        np.testing.assert_allclose(lf, lf0, rtol=1e-14)

    def test_ph_example(self):
        lS, _, _ = link_log("PH", None, *LL0, np.log(2.0), 1.0)
        assert abs(np.exp(lS) - 0.25) < 1e-15

    def test_po_example(self):
        lS, _, _ = link_log("PO", None, *LL0, np.log(2.0), 1.0)
        assert abs(np.exp(lS) - 1 / 3) < 1e-15

    def test_aft_time_scaling(self):
        lS, _, _ = link_log("AFT", None, *LL0, np.log(2.0), 0.5)
        assert abs(np.exp(lS) - 0.5) < 1e-15

    @pytest.mark.parametrize("link", ["AFT", "PH", "PO"])
    def test_density_is_minus_derivative(self, link, rng):
        w = rng.dirichlet(np.ones(4))
        t = np.array([0.3, 1.0, 2.5])
        h = 1e-6
        eta = 0.4
        Sp = np.exp(link_log(link, w, "lognormal", (0.1, 0.2), eta, t + h)[0])
        Sm = np.exp(link_log(link, w, "lognormal", (0.1, 0.2), eta, t - h)[0])
        f = np.exp(link_log(link, w, "lognormal", (0.1, 0.2), eta, t)[2])
        np.testing.assert_allclose(-(Sp - Sm) / (2 * h), f, rtol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["AFT", "PH", "PO"]), st.floats(-5, 5), st.floats(0.01, 50))
    def test_cdf_complements_survival(self, link, eta, t):
        lS, lF, _ = link_log(link, None, "weibull", (0.0, 0.3), eta, t)
        assert abs(np.exp(lS) + np.exp(lF) - 1.0) < 1e-12

    def test_unknown_link(self):
        with pytest.raises(ValidationError):
            link_log("XX", None, *LL0, 0.0, 1.0)

    def test_nonfinite_predictor(self):
        with pytest.raises(NumericalError):
            link_log("PH", None, *LL0, np.nan, 1.0)

    def test_link_survival_rejects_zero_time(self):
        base = TbpState.uniform(3, CenteringFamily("weibull"))
        with pytest.raises(ValidationError):
            link_survival("PH", base, 0.0, [0.0, 1.0])


def _loglogistic_terms(u, a, b):
    lik = CensoredLikelihood(u, a, b)
    return lik.terms(lambda t, idx: link_log("PH", None, *LL0, np.zeros(t.size), t))


class TestCensoredLikelihood:
    # Oracle: S(t) = 1/(1+t), f(t) = 1/(1+t)^2.
    def test_each_censoring_kind(self):
        a = np.array([1.0, 1.0, 0.0, 1.0])
        b = np.array([1.0, np.inf, 3.0, 3.0])
        out = _loglogistic_terms(np.zeros(4), a, b)
        expected = np.log([0.25, 0.5, 0.75, 0.5 - 0.25])
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_truncation_divides_by_entry_survival(self):
        out = _loglogistic_terms(np.array([1.0]), np.array([3.0]), np.array([np.inf]))
        assert abs(out[0] - np.log(0.25 / 0.5)) < 1e-14

    def test_row_subset(self):
        a = np.array([1.0, 2.0, 3.0])
        lik = CensoredLikelihood(np.zeros(3), a, a)
        fun = lambda t, idx: link_log("PH", None, *LL0, np.zeros(t.size), t)  # noqa: E731
        np.testing.assert_array_equal(lik.terms(fun, np.array([2]))[0], lik.terms(fun)[2])

    def test_narrow_interval_falls_back_to_density(self):
        a, b = np.array([1.0]), np.array([1.0 + 1e-14])
        lik = CensoredLikelihood(np.zeros(1), a, b)
        out = lik.terms(lambda t, idx: link_log("PH", None, *LL0, np.zeros(t.size), t))
        assert np.isfinite(out[0])
        assert lik.flags[0]

    def test_log_interval_prob(self):
        assert abs(log_interval_prob(np.log(0.5), np.log(0.2)) - np.log(0.3)) < 1e-15


class TestLogLikelihood:
    def test_matches_scipy_weibull(self, rng):
        n = 30
        X = rng.standard_normal((n, 1))
        a = rng.weibull(1.5, n)
        b = np.where(rng.uniform(size=n) < 0.3, np.inf, a)
        ds = SurvDataset(u=np.zeros(n), a=a, b=b, X=X, unit=np.zeros(n, dtype=int),
                         covariate_names=["x"])
        beta = np.array([0.7])
        spec = ModelSpec("PH", TbpState.uniform(1, CenteringFamily("weibull"), np.inf), beta)
        total, per = log_likelihood(ds, spec)
        # Weibull(0, 0) has S0(t) = exp(-t); PH scales the hazard by exp(eta).
        e = np.exp(X @ beta)
        oracle = np.where(np.isinf(b), -e * a, np.log(e) - e * a)
        np.testing.assert_allclose(per, oracle, rtol=1e-12)
        assert abs(total - oracle.sum()) < 1e-10

    def test_beta_length_mismatch(self):
        ds = SurvDataset(u=np.zeros(2), a=np.ones(2), b=np.ones(2), X=np.zeros((2, 2)),
                         unit=np.zeros(2, dtype=int), covariate_names=["a", "b"])
        spec = ModelSpec("AFT", TbpState.uniform(2, CenteringFamily("weibull")), [0.0])
        with pytest.raises(ValidationError):
            log_likelihood(ds, spec)

    def test_bad_gamma(self):
        with pytest.raises(ValidationError):
            ModelSpec("PH", TbpState.uniform(2, CenteringFamily("weibull")), [0.0], gamma=[2])


class TestSelectionPrior:
    def test_g_example(self):
        assert abs(selection_g(10.0, 0.9, 4) - (2.302585 / 1.281552) ** 2 / 4) < 1e-6
        assert abs(selection_g(10.0, 0.9, 4) - 0.80705) < 1e-5

    def test_g_unit_quantile(self):
        M = np.exp(special.ndtri(0.9))
        np.testing.assert_allclose(selection_g(M, 0.9, 3), 1 / 3, rtol=1e-14)

    def test_q_outside_range(self):
        with pytest.raises(ValidationError):
            selection_g(10.0, 0.4)

    def test_matches_multivariate_normal(self, rng):
        X = rng.standard_normal((40, 3))
        X -= X.mean(axis=0)
        g = 0.8
        beta = rng.standard_normal(3)
        cov = selection_covariance(X, g)
        oracle = stats.multivariate_normal(np.zeros(3), cov).logpdf(beta) + 3 * np.log(0.5)
        assert abs(selection_log_prior(beta, np.ones(3), X, g) - oracle) < 1e-10

    def test_single_covariate_example(self):
        # X'X = n and g = 1, so beta ~ N(0, 1); plus log 0.5 for the indicator.
        X = np.array([[-1.0], [1.0]])
        val = selection_log_prior([1.0], [1], X, 1.0)
        assert abs(val - (-0.5 - 0.5 * np.log(2 * np.pi) + np.log(0.5))) < 1e-14

    def test_gamma_does_not_enter(self, rng):
        X = rng.standard_normal((20, 2))
        X -= X.mean(axis=0)
        beta = np.array([0.3, -0.2])
        assert selection_log_prior(beta, [1, 0], X, 1.0) == selection_log_prior(beta, [0, 1], X,
                                                                                1.0)

    def test_collinear_columns(self, rng):
        x = rng.standard_normal(10)
        X = np.column_stack([x, 2 * x]) - np.mean(np.column_stack([x, 2 * x]), axis=0)
        with pytest.raises(ValidationError, match="collinear"):
            selection_log_prior([0.0, 0.0], [1, 1], X, 1.0)
