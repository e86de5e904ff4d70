import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spsurv.errors import SchemaError, SpatialJoinError, StructureError, ValidationError
from spsurv.survdata import (CensoredInterval, Observation, Schema, SpatialStructure,
                             SurvDataset, episode_expand, load_dataset, read_adjacency,
                             standardize_covariates, write_adjacency, write_dataset)


def _write(path, text):
    path.write_text(text)
    return path


class TestCensoredInterval:
    def test_kinds(self):
        assert CensoredInterval(1.0, 1.0).is_exact
        assert CensoredInterval(3.0, np.inf).is_right_censored
        assert CensoredInterval(0.0, 2.0).is_left_censored()

    def test_invalid(self):
        with pytest.raises(ValidationError):
            CensoredInterval(2.0, 1.0)
        with pytest.raises(ValidationError):
            CensoredInterval(-1.0, 1.0)

    def test_truncation_after_lower_end(self):
        with pytest.raises(ValidationError):
            Observation(CensoredInterval(1.0, 2.0), [0.0], u=1.5)


class TestLoadDataset:
    def test_right_censoring_schema(self, tmp_path):
        f = _write(tmp_path / "d.csv", "time,cens,x\n1,1,0.5\n3,0,1.5\n")
        ds = load_dataset(f, {"kind": "right", "time": "time", "status": "cens",
                              "covariates": ["x"]})
        np.testing.assert_array_equal(ds.a, [1.0, 3.0])
        np.testing.assert_array_equal(ds.b, [1.0, np.inf])
        assert ds.structure.kind == "none"

    def test_interval_schema_missing_right_end(self, tmp_path):
        f = _write(tmp_path / "d.csv", "tl,tr,x\n5,NA,0\n2,4,1\n,3,2\n")
        ds = load_dataset(f, {"kind": "interval2", "tleft": "tl", "tright": "tr",
                              "covariates": ["x"]})
        np.testing.assert_array_equal(ds.a, [5.0, 2.0, 0.0])
        np.testing.assert_array_equal(ds.b, [np.inf, 4.0, 3.0])

    def test_missing_column(self, tmp_path):
        f = _write(tmp_path / "d.csv", "time,cens\n1,1\n")
        with pytest.raises(SchemaError, match="x"):
            load_dataset(f, {"kind": "right", "time": "time", "status": "cens",
                             "covariates": ["x"]})

    def test_reversed_interval_reports_row(self, tmp_path):
        f = _write(tmp_path / "d.csv", "tl,tr\n1,2\n5,3\n")
        with pytest.raises(ValidationError) as exc:
            load_dataset(f, {"kind": "interval2", "tleft": "tl", "tright": "tr"})
        assert exc.value.row == 1

    def test_unknown_unit_label(self, tmp_path):
        f = _write(tmp_path / "d.csv", "time,cens,region\n1,1,A\n2,0,C\n")
        adj = (["A", "B"], np.array([[0, 1], [1, 0]]))
        with pytest.raises(SpatialJoinError):
            load_dataset(f, {"time": "time", "status": "cens", "unit": "region"}, adj)

    def test_areal_rows_sorted_by_unit(self, tmp_path):
        f = _write(tmp_path / "d.csv", "time,cens,region\n1,1,B\n2,0,A\n3,1,B\n")
        adj = (["A", "B"], np.array([[0, 1], [1, 0]]))
        ds = load_dataset(f, {"time": "time", "status": "cens", "unit": "region"}, adj)
        np.testing.assert_array_equal(ds.unit, [0, 1, 1])
        np.testing.assert_array_equal(ds.a, [2.0, 1.0, 3.0])
        assert ds.structure.kind == "areal"

    def test_geo_and_clustered(self, tmp_path):
        f = _write(tmp_path / "d.csv", "time,cens,site,lon,lat\n1,1,s1,0,0\n2,0,s2,1,1\n"
                                       "3,1,s1,0,0\n")
        geo = load_dataset(f, {"time": "time", "status": "cens", "unit": "site",
                               "coords": ["lon", "lat"]})
        assert geo.structure.kind == "geo" and geo.m == 2
        cl = load_dataset(f, {"time": "time", "status": "cens", "unit": "site"})
        assert cl.structure.kind == "clustered" and cl.m == 2

    def test_unknown_schema_key(self):
        with pytest.raises(ValidationError):
            Schema.from_dict({"colour": "red"})


class TestAdjacency:
    def test_round_trip(self, tmp_path):
        E = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        write_adjacency(["a", "b", "c"], E, tmp_path / "adj.csv")
        labels, E2 = read_adjacency(tmp_path / "adj.csv")
        assert labels == ["a", "b", "c"]
        np.testing.assert_array_equal(E2, E)

    def test_isolated_region(self):
        with pytest.raises(StructureError):
            SpatialStructure.areal(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))

    def test_asymmetric(self):
        with pytest.raises(StructureError):
            SpatialStructure.areal(np.array([[0, 1], [0, 0]]))


def _dataset(X, names=None):
    n = X.shape[0]
    return SurvDataset(u=np.zeros(n), a=np.ones(n), b=np.ones(n), X=X,
                       unit=np.zeros(n, dtype=int),
                       covariate_names=names or [f"x{j}" for j in range(X.shape[1])])


class TestStandardize:
    def test_three_values(self):
        ds = standardize_covariates(_dataset(np.array([[1.0], [2.0], [3.0]])))
        np.testing.assert_allclose(ds.X[:, 0], [-1.0, 0.0, 1.0])
        np.testing.assert_allclose(ds.x_mean, [2.0])
        np.testing.assert_allclose(ds.x_sd, [1.0])

    def test_disabled(self):
        ds = standardize_covariates(_dataset(np.array([[1.0], [5.0]])), enabled=False)
        np.testing.assert_array_equal(ds.X[:, 0], [1.0, 5.0])
        np.testing.assert_array_equal(ds.x_mean, [0.0])
        np.testing.assert_array_equal(ds.x_sd, [1.0])

    def test_binary_column(self):
        ds = standardize_covariates(_dataset(np.array([[0.0], [1.0], [0.0], [1.0]])))
        assert ds.x_mean[0] == 0.5
        np.testing.assert_allclose(ds.x_sd[0], 0.5773502691896257, rtol=1e-15)

    def test_zero_variance_names_column(self):
        with pytest.raises(ValidationError, match="age"):
            standardize_covariates(_dataset(np.array([[1.0, 2.0], [1.0, 3.0]]), ["age", "w"]))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (6, 2), elements=st.floats(-1e3, 1e3)))
    def test_original_scale_round_trip(self, X):
        if np.any(X.std(axis=0) < 1e-3):
            return
        ds = standardize_covariates(_dataset(X))
        np.testing.assert_allclose(ds.original_X(), X, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(ds.scale_new(X), ds.X, rtol=1e-9, atol=1e-9)

    def test_unscale_coefficients_preserve_predictor(self, rng):
        X = rng.normal(3.0, 2.0, size=(20, 2))
        ds = standardize_covariates(_dataset(X))
        beta = np.array([0.4, -1.2])
        icpt, b = ds.unscale_coefficients(beta, intercept=0.7)
        np.testing.assert_allclose(icpt + X @ b, 0.7 + ds.X @ beta, rtol=1e-12)


class TestEpisodeExpand:
    def test_two_rows(self):
        obs = episode_expand([
            {"subject": 1, "tstart": 0, "tstop": 192, "event": 0, "x": [1.0]},
            {"subject": 1, "tstart": 192, "tstop": 400, "event": 1, "x": [2.0]}])
        assert [(o.u, o.interval.a, o.interval.b) for o in obs] == [
            (0.0, 192.0, np.inf), (192.0, 400.0, 400.0)]

    def test_single_row(self):
        obs = episode_expand([{"subject": 1, "tstart": 0, "tstop": 8, "event": 1, "x": [0]}])
        assert len(obs) == 1
        assert (obs[0].u, obs[0].interval.a, obs[0].interval.b) == (0.0, 8.0, 8.0)

    def test_all_censored(self):
        obs = episode_expand([
            {"subject": 1, "tstart": 0, "tstop": 5, "event": 0, "x": [0]},
            {"subject": 1, "tstart": 5, "tstop": 8, "event": 0, "x": [0]}])
        assert [(o.u, o.interval.b) for o in obs] == [(0.0, np.inf), (5.0, np.inf)]

    def test_gap(self):
        with pytest.raises(ValidationError, match="contiguous"):
            episode_expand([
                {"subject": 1, "tstart": 0, "tstop": 5, "event": 0, "x": [0]},
                {"subject": 1, "tstart": 6, "tstop": 8, "event": 0, "x": [0]}])

    def test_event_on_non_final_row(self):
        with pytest.raises(ValidationError):
            episode_expand([
                {"subject": 1, "tstart": 0, "tstop": 5, "event": 1, "x": [0]},
                {"subject": 1, "tstart": 5, "tstop": 8, "event": 0, "x": [0]}])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=6), st.booleans())
    def test_count_and_increasing_truncation(self, widths, event):
        stops = np.cumsum(widths)
        starts = np.concatenate([[0.0], stops[:-1]])
        rows = [{"subject": "s", "tstart": a, "tstop": b, "event": event and k == len(widths) - 1,
                 "x": [k]} for k, (a, b) in enumerate(zip(starts, stops))]
        obs = episode_expand(rows)
        assert len(obs) == len(rows)
        assert np.all(np.diff([o.u for o in obs]) > 0)


class TestWriteDataset:
    def test_round_trip(self, tmp_path, rng):
        n = 12
        E = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        a = rng.exponential(size=n)
        b = np.where(rng.uniform(size=n) < 0.3, np.inf, a)
        ds = SurvDataset(u=np.zeros(n), a=a, b=b, X=rng.standard_normal((n, 2)),
                         unit=np.sort(rng.integers(0, 3, n)), covariate_names=["x1", "x2"],
                         structure=SpatialStructure.areal(E), unit_labels=["r0", "r1", "r2"])
        schema = write_dataset(ds, tmp_path / "d.csv")
        write_adjacency(ds.unit_labels, E, tmp_path / "adj.csv")
        back = load_dataset(tmp_path / "d.csv", schema, tmp_path / "adj.csv")
        np.testing.assert_array_equal(back.a, ds.a)
        np.testing.assert_array_equal(back.b, ds.b)
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.unit, ds.unit)
