import numpy as np
import pytest

from spsurv.errors import NumericalError, StructureError
from spsurv.frailty import (correlation_matrix, dense_precision, greedy_coloring,
                            grf_conditional, grf_correlation, icar_conditional,
                            icar_log_density, iid_log_density, phi0_default,
                            tau2_full_conditional, tau2_gibbs)


class _MeanGamma:
    """Stand-in generator returning the gamma mean."""

    def gamma(self, shape, scale):
        return shape * scale


class TestIcar:
    def test_pair(self):
        E = np.array([[0, 1], [1, 0]])
        mean, var = icar_conditional(0, np.array([0.0, 0.7]), E, 2.0)
        assert (mean, var) == (0.7, 2.0)

    def test_star_center(self):
        E = np.zeros((4, 4))
        E[0, 1:] = E[1:, 0] = 1
        mean, var = icar_conditional(0, np.array([9.0, 1.0, 2.0, 3.0]), E, 1.5)
        assert mean == 2.0 and abs(var - 0.5) < 1e-15

    def test_zero_vector(self):
        E = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]])
        assert icar_conditional(1, np.zeros(3), E, 1.0)[0] == 0.0

    def test_isolated(self):
        E = np.array([[0, 0], [0, 0]])
        with pytest.raises(StructureError):
            icar_conditional(0, np.zeros(2), E, 1.0)

    def test_log_density(self):
        E = np.array([[0, 1], [1, 0]])
        tau2 = 0.8
        assert icar_log_density(np.zeros(2), E, tau2) == 0.5 * np.log(1 / tau2)
        c = 0.3
        val = icar_log_density(np.array([c, -c]), E, tau2)
        assert abs(val - (0.5 * np.log(1 / tau2) - 2 * c ** 2 / tau2)) < 1e-15

    def test_disconnected(self):
        E = np.zeros((4, 4))
        E[0, 1] = E[1, 0] = E[2, 3] = E[3, 2] = 1
        with pytest.raises(StructureError):
            icar_log_density(np.zeros(4), E, 1.0)

    def test_coloring_is_proper(self, rng):
        m = 30
        E = (rng.uniform(size=(m, m)) < 0.15).astype(int)
        E = np.triu(E, 1)
        E = E + E.T
        colors = greedy_coloring(E)
        assert sorted(np.concatenate(colors).tolist()) == list(range(m))
        for c in colors:
            assert not E[np.ix_(c, c)].any()


class TestIid:
    def test_standard_normal(self):
        assert abs(iid_log_density(np.zeros(1), 1.0) + 0.918938533204673) < 1e-12
        assert abs(iid_log_density(np.ones(1), 1.0) + 1.418938533204673) < 1e-12


class TestGrf:
    def test_correlation(self):
        assert grf_correlation([0, 0], [0, 0], 2.0) == 1.0
        assert abs(grf_correlation([0, 0], [1, 0], 1.0, 1.0) - np.exp(-1)) < 1e-15
        assert abs(grf_correlation([0, 0], [2, 0], 1.0, 2.0) - np.exp(-4)) < 1e-15

    def test_identity_precision(self):
        mean, var = grf_conditional(1, np.array([1.0, 2.0, 3.0]), np.eye(3), 0.4)
        assert mean == 0.0 and var == 0.4

    def test_bivariate(self):
        r, tau2 = 0.6, 1.7
        R = np.array([[1, r], [r, 1]])
        P, _ = dense_precision(R)
        mean, var = grf_conditional(0, np.array([5.0, 0.9]), P, tau2)
        assert abs(mean - r * 0.9) < 1e-14
        assert abs(var - tau2 * (1 - r * r)) < 1e-14

    def test_not_positive_definite(self):
        with pytest.raises(NumericalError):
            dense_precision(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_phi0(self):
        assert abs(phi0_default(np.array([[0.0], [1.0]])) - np.log(1000)) < 1e-12
        assert abs(phi0_default(np.array([[0.0], [1.0]]), 2.0) - np.sqrt(np.log(1000))) < 1e-12

    def test_matrix_symmetric_unit_diagonal(self, rng):
        R = correlation_matrix(rng.uniform(size=(10, 2)), 3.0, 1.5)
        np.testing.assert_array_equal(np.diag(R), 1.0)
        np.testing.assert_array_equal(R, R.T)


class TestTau2:
    def test_zero_quadratic_form(self):
        shape, rate = tau2_full_conditional(np.zeros(5), "iid", 2.0, 3.0)
        assert (shape, rate) == (4.5, 3.0)
        draw = tau2_gibbs(np.zeros(5), "iid", 2.0, 3.0, _MeanGamma())
        assert abs(1 / draw - 4.5 / 3.0) < 1e-15

    def test_car_rank(self):
        E = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        shape, rate = tau2_full_conditional(np.array([1.0, 0.0, -1.0]), "car", 1.0, 1.0, E=E)
        assert shape == 2.0 and rate == 1.0 + 0.5 * 2.0

    def test_grf_quadratic(self, rng):
        R = correlation_matrix(rng.uniform(size=(4, 2)), 2.0)
        P, _ = dense_precision(R)
        v = rng.standard_normal(4)
        _, rate = tau2_full_conditional(v, "grf", 1.0, 0.5, precision=P)
        assert abs(rate - (0.5 + 0.5 * v @ np.linalg.solve(R, v))) < 1e-10
