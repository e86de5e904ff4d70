import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special

from spsurv.errors import ValidationError
from spsurv.modelcheck import (ResidualSample, dic, hazard_slope, lpml, mcse, model_frequencies,
                               posterior_summary, residual_intervals, savage_dickey_bf,
                               tbp_null_density, turnbull_npmle, waic)


def kaplan_meier(time, event, at):
    """Product-limit estimate at ``at`` (events precede censorings at ties)."""
    S = np.ones_like(at, dtype=float)
    for t in np.unique(time[event]):
        d = np.sum((time == t) & event)
        n_risk = np.sum(time >= t)
        S[at >= t] *= 1.0 - d / n_risk
    return S


class TestTurnbull:
    def test_exact_data_is_empirical(self, rng):
        t = rng.exponential(size=25)
        res = turnbull_npmle(t, t)
        grid = np.sort(t)
        np.testing.assert_allclose(res.survival_at(grid), 1.0 - np.arange(1, 26) / 25,
                                   atol=1e-12)

    def test_right_censored_matches_kaplan_meier(self, rng):
        n = 40
        t = rng.exponential(size=n)
        event = rng.uniform(size=n) < 0.7
        right = np.where(event, t, np.inf)
        res = turnbull_npmle(t, right, tol=1e-15)
        grid = np.sort(t)
        np.testing.assert_allclose(res.survival_at(grid), kaplan_meier(t, event, grid),
                                   atol=1e-10)

    def test_mass_sums_to_one(self, rng):
        a = rng.uniform(0, 2, 30)
        b = a + rng.uniform(0.1, 1, 30)
        res = turnbull_npmle(a, b)
        assert abs(res.mass.sum() - 1.0) < 1e-12
        assert res.converged

    def test_single_interval(self):
        res = turnbull_npmle([1.0], [2.0])
        np.testing.assert_array_equal(res.mass, [1.0])

    def test_fully_uninformative(self):
        assert turnbull_npmle([0.0, 0.0], [np.inf, np.inf]).degenerate

    def test_reversed_interval(self):
        with pytest.raises(ValidationError):
            turnbull_npmle([2.0], [1.0])

    def test_exponential_slope(self, rng):
        t = rng.exponential(size=2000)
        slope = hazard_slope(turnbull_npmle(t, t))
        assert 0.9 <= slope <= 1.1


class TestResiduals:
    def test_unit_exponential_identity(self):
        a = np.array([0.5, 1.0, 2.0])
        b = np.array([0.5, np.inf, 3.0])
        r = residual_intervals(lambda t: -t, a, b)
        np.testing.assert_array_equal(r.ra, a)
        np.testing.assert_array_equal(r.rb, b)

    def test_misordered(self):
        with pytest.raises(ValidationError):
            ResidualSample([1.0], [0.5])


class TestCriteria:
    def test_two_draw_cpo(self):
        ll = np.array([[0.0], [np.log(2.0)]])
        total, cpo, unstable = lpml(ll)
        assert abs(cpo[0] - 4 / 3) < 1e-14
        assert abs(total - np.log(4 / 3)) < 1e-14
        assert not unstable[0]

    def test_unstable_flag(self):
        _, _, unstable = lpml(np.array([[0.0, 0.0], [-40.0, -1.0]]))
        np.testing.assert_array_equal(unstable, [True, False])

    def test_waic_hand_case(self):
        ll = np.array([[0.0], [np.log(2.0)]])
        w, pw = waic(ll)
        assert abs(pw - np.log(2.0) ** 2 / 2) < 1e-14
        assert abs(w - (-2.0 * (np.log(1.5) - pw))) < 1e-14

    def test_constant_chain(self):
        ll = np.full((50, 3), -1.234)
        w, pw = waic(ll)
        assert pw == 0.0
        d, pd = dic(ll, -1.234 * 3)
        assert abs(pd) < 1e-12
        assert abs(d - 2 * 1.234 * 3) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-20, 0)))
    def test_lpml_below_lppd(self, ll):
        lppd = (special.logsumexp(ll, axis=0) - np.log(ll.shape[0])).sum()
        assert lpml(ll)[0] <= lppd + 1e-9

    def test_dic_definition(self, rng):
        ll = rng.normal(-1, 0.2, size=(100, 5))
        plugin = -4.0
        d, pd = dic(ll, plugin)
        dbar = -2 * ll.sum(axis=1).mean()
        assert abs(pd - (dbar + 2 * plugin)) < 1e-10
        assert abs(d - (dbar + pd)) < 1e-10

    def test_one_draw(self):
        with pytest.raises(ValidationError):
            lpml(np.zeros((1, 3)))


class TestBayesFactor:
    def test_null_density_example(self):
        assert tbp_null_density(1.0, 2) == 0.25

    def test_null_density_increases_with_alpha(self):
        vals = [tbp_null_density(a, 5) for a in (0.5, 1.0, 5.0, 50.0)]
        assert np.all(np.diff(vals) > 0)

    def test_gaussian_posterior(self, rng):
        z = rng.normal(0.5, 0.2, size=(20000, 1))
        bf = savage_dickey_bf(z, np.ones(20000))
        oracle = 0.25 / (np.exp(-0.5 * (0.5 / 0.2) ** 2) / (0.2 * np.sqrt(2 * np.pi)))
        assert abs(np.log(bf) - np.log(oracle)) < 0.05


class TestSummaries:
    def test_mcse_iid(self, rng):
        x = rng.standard_normal(40000)
        assert abs(mcse(x) / (1 / np.sqrt(40000)) - 1) < 0.2

    def test_mcse_columns(self, rng):
        assert mcse(rng.standard_normal((400, 3))).shape == (3,)

    def test_posterior_summary(self):
        s = posterior_summary(np.arange(101.0))
        assert s["mean"][0] == 50.0 and s["median"][0] == 50.0
        np.testing.assert_allclose([s["lower"][0], s["upper"][0]], [2.5, 97.5])

    def test_model_frequencies(self):
        g = np.array([[1, 0], [1, 0], [1, 1], [0, 0]])
        assert model_frequencies(g, ["a", "b"]) == [("a", 0.5), ("(none)", 0.25),
                                                     ("a,b", 0.25)]
