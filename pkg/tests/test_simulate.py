import numpy as np
import pytest
from scipy import special, stats

from spsurv.errors import ValidationError
from spsurv.simulate import pit_values, simulate_copula, simulate_survreg


class TestSurvreg:
    @pytest.mark.parametrize("link, family", [("AFT", "lognormal"), ("PH", "weibull"),
                                              ("PO", "loglogistic")])
    def test_probability_integral_transform(self, link, family, rng):
        theta, beta = (0.2, -0.1), np.array([0.6, -0.4])
        ds, _ = simulate_survreg(2000, link, family, theta, beta, rng)
        u = pit_values(link, None, family, theta, ds.X @ beta, ds.a)
        assert stats.kstest(u, "uniform").pvalue > 0.001

    def test_tbp_baseline(self, rng):
        w = np.array([0.6, 0.1, 0.3])
        theta, beta = (0.0, 0.0), np.array([0.5])
        ds, _ = simulate_survreg(2000, "PH", "weibull", theta, beta, rng, w=w)
        u = pit_values("PH", w, "weibull", theta, ds.X @ beta, ds.a)
        assert stats.kstest(u, "uniform").pvalue > 0.001

    def test_censoring_rate(self, rng):
        ds, truth = simulate_survreg(3000, "PH", "weibull", (0.0, 0.0), [1.0], rng,
                                     censor_rate=0.3)
        assert abs(np.isinf(ds.b).mean() - 0.3) < 0.03
        assert truth["beta"] == [1.0]

    def test_car_frailty_sums_to_zero(self, rng):
        ds, truth = simulate_survreg(200, "PH", "weibull", (0.0, 0.0), [1.0], rng,
                                     frailty="car", m=9)
        assert ds.structure.kind == "areal" and ds.m == 9
        assert abs(np.sum(truth["v"])) < 1e-10

    def test_unknown_link(self, rng):
        with pytest.raises(ValidationError):
            simulate_survreg(10, "XX", "weibull", (0.0, 0.0), [1.0], rng)


class TestCopula:
    @staticmethod
    def _scores(ds, beta, shape=1.5, scale=1.0):
        H = (ds.a / scale) ** shape * np.exp(ds.X @ beta)
        return special.ndtri(-np.expm1(-H))

    @staticmethod
    def _mean_pairwise(z):
        # Scores are N(0, 1) marginally, so the mean cross product is a correlation.
        n = z.size
        return (z.sum() ** 2 - z @ z) / (n * (n - 1))

    def test_independence(self, rng):
        beta = np.array([0.5])
        ds, _ = simulate_copula(1000, beta, 0.0, 5.0, rng)
        assert abs(self._mean_pairwise(self._scores(ds, beta))) < 0.05

    def test_dependence_shows_in_neighbours(self, rng):
        ds, _ = simulate_copula(600, [0.0], 0.95, 2.0, rng)
        coords = ds.structure.coords[ds.unit]
        d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(axis=1)
        assert np.corrcoef(np.log(ds.a), np.log(ds.a[nn]))[0, 1] > 0.5

    def test_weibull_marginal(self, rng):
        ds, _ = simulate_copula(2000, [0.0], 0.0, 5.0, rng, shape=1.5, scale=2.0)
        assert stats.kstest(ds.a, stats.weibull_min(1.5, scale=2.0).cdf).pvalue > 0.001

    def test_unknown_marginal(self, rng):
        with pytest.raises(ValidationError):
            simulate_copula(5, [0.0], 0.0, 1.0, rng, marginal="gamma")
