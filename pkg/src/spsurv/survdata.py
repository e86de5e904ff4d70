"""Survival data model, file ingestion and covariate standardization.

Observations are stored column-wise in :class:`SurvDataset` so the samplers
can evaluate likelihoods with vectorized numpy code.  The row-wise
:class:`Observation` view is available through
:meth:`SurvDataset.observations`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError, SpatialJoinError, StructureError, ValidationError

INF_TOKENS = frozenset({"", "inf", "+inf", "infinity", "na", "nan"})


@dataclass(frozen=True)
class CensoredInterval:
    """Censoring interval ``(a, b)`` for one event time.

    ``a == b`` denotes an exactly observed event, ``b == inf`` a
    right-censored time.
    """

    a: float
    b: float

    def __post_init__(self):
        if not (self.a >= 0) or math.isinf(self.a):
            raise ValidationError(f"lower endpoint must be finite and >= 0, got {self.a}")
        if not self.a <= self.b:
            raise ValidationError(f"interval ({self.a}, {self.b}) has a > b")

    @property
    def is_exact(self) -> bool:
        return self.a == self.b

    @property
    def is_right_censored(self) -> bool:
        return math.isinf(self.b)

    def is_left_censored(self, u: float = 0.0) -> bool:
        return self.a == u and self.b > self.a


@dataclass
class Observation:
    interval: CensoredInterval
    x: np.ndarray
    u: float = 0.0
    z: np.ndarray | None = None
    unit: int = 0
    subject: str | None = None

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if self.z is not None:
            self.z = np.atleast_1d(np.asarray(self.z, dtype=float))
        if self.u < 0 or self.u > self.interval.a:
            raise ValidationError(
                f"truncation time {self.u} must satisfy 0 <= u <= a = {self.interval.a}")


@dataclass(frozen=True)
class SpatialStructure:
    """Spatial information attached to a dataset.

    ``kind`` is one of ``"areal"`` (adjacency matrix), ``"geo"`` (point
    coordinates), ``"clustered"`` (exchangeable units) or ``"none"``.
    """

    kind: str
    m: int
    adjacency: np.ndarray | None = None
    coords: np.ndarray | None = None

    @classmethod
    def areal(cls, adjacency) -> "SpatialStructure":
        E = np.asarray(adjacency, dtype=float)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise StructureError("adjacency matrix must be square")
        if not np.array_equal(E, E.T):
            raise StructureError("adjacency matrix must be symmetric")
        if np.any(np.diag(E) != 0):
            raise StructureError("adjacency matrix must have a zero diagonal")
        if not np.all((E == 0) | (E == 1)):
            raise StructureError("adjacency matrix must be binary")
        isolated = np.flatnonzero(E.sum(axis=1) == 0)
        if isolated.size:
            raise StructureError(f"regions without neighbors: {isolated.tolist()}")
        return cls("areal", E.shape[0], adjacency=E)

    @classmethod
    def geo(cls, coords) -> "SpatialStructure":
        C = np.asarray(coords, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        if C.shape[1] not in (1, 2, 3):
            raise StructureError("coordinates must have 1, 2 or 3 columns")
        if not np.all(np.isfinite(C)):
            raise StructureError("coordinates must be finite")
        return cls("geo", C.shape[0], coords=C)

    @classmethod
    def clustered(cls, m: int) -> "SpatialStructure":
        return cls("clustered", int(m))

    @classmethod
    def none(cls) -> "SpatialStructure":
        return cls("none", 1)


@dataclass
class SurvDataset:
    """Column-wise survival dataset sorted by spatial unit.

    ``x_mean``/``x_sd`` hold the standardization applied to ``X`` (zeros and
    ones when the covariates are on their original scale).
    """

    u: np.ndarray
    a: np.ndarray
    b: np.ndarray
    X: np.ndarray
    unit: np.ndarray
    covariate_names: list[str]
    structure: SpatialStructure = field(default_factory=SpatialStructure.none)
    Z: np.ndarray | None = None
    baseline_names: list[str] = field(default_factory=list)
    subject: np.ndarray | None = None
    unit_labels: list[str] | None = None
    x_mean: np.ndarray | None = None
    x_sd: np.ndarray | None = None
    z_mean: np.ndarray | None = None
    z_sd: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        n = self.a.shape[0]
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1)
        self.unit = np.asarray(self.unit, dtype=int)
        if self.Z is not None:
            self.Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        if self.subject is None:
            self.subject = np.array([str(i) for i in range(n)], dtype=object)
        p = self.X.shape[1]
        if self.x_mean is None:
            self.x_mean, self.x_sd = np.zeros(p), np.ones(p)
        if self.Z is not None and self.z_mean is None:
            q = self.Z.shape[1]
            self.z_mean, self.z_sd = np.zeros(q), np.ones(q)
        if len(self.covariate_names) != p:
            raise ValidationError("covariate_names does not match the number of columns of X")
        self._validate()

    def _validate(self):
        bad = np.flatnonzero(~((self.u >= 0) & (self.u <= self.a) & (self.a <= self.b)
                               & np.isfinite(self.a)))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"invalid interval u={self.u[i]}, a={self.a[i]}, b={self.b[i]}", row=i)
        if self.unit.size and (self.unit.min() < 0 or self.unit.max() >= self.structure.m):
            raise SpatialJoinError("unit index outside the spatial structure")
        if np.any(np.diff(self.unit) < 0):
            raise ValidationError("observations must be sorted by unit")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.structure.m

    @property
    def n_i(self) -> np.ndarray:
        return np.bincount(self.unit, minlength=self.m)

    @property
    def exact(self) -> np.ndarray:
        return self.a == self.b

    @property
    def right_censored(self) -> np.ndarray:
        return np.isinf(self.b)

    @property
    def truncated(self) -> np.ndarray:
        return self.u > 0

    @property
    def standardized(self) -> bool:
        return bool(np.any(self.x_mean != 0) or np.any(self.x_sd != 1))

    def observations(self) -> list[Observation]:
        obs = []
        for i in range(self.n):
            z = None if self.Z is None else self.Z[i]
            obs.append(Observation(CensoredInterval(self.a[i], self.b[i]), self.X[i],
                                   u=float(self.u[i]), z=z, unit=int(self.unit[i]),
                                   subject=self.subject[i]))
        return obs

    @classmethod
    def from_observations(cls, observations: Sequence[Observation],
                          covariate_names=None, structure=None,
                          baseline_names=None) -> "SurvDataset":
        observations = list(observations)
        if not observations:
            raise ValidationError("dataset is empty")
        order = sorted(range(len(observations)), key=lambda i: observations[i].unit)
        obs = [observations[i] for i in order]
        p = {o.x.shape[0] for o in obs}
        if len(p) != 1:
            raise ValidationError("inconsistent number of covariates across observations")
        p = p.pop()
        has_z = obs[0].z is not None
        if has_z and len({o.z.shape[0] for o in obs}) != 1:
            raise ValidationError("inconsistent number of baseline covariates")
        if structure is None:
            m = max(o.unit for o in obs) + 1
            structure = SpatialStructure.clustered(m) if m > 1 else SpatialStructure.none()
        names = list(covariate_names) if covariate_names is not None else [
            f"x{j + 1}" for j in range(p)]
        Z = np.array([o.z for o in obs]) if has_z else None
        bnames = list(baseline_names) if baseline_names is not None else (
            [f"z{j + 1}" for j in range(Z.shape[1])] if has_z else [])
        return cls(u=[o.u for o in obs], a=[o.interval.a for o in obs],
                   b=[o.interval.b for o in obs], X=np.array([o.x for o in obs]).reshape(len(obs), p),
                   unit=[o.unit for o in obs], covariate_names=names, structure=structure,
                   Z=Z, baseline_names=bnames,
                   subject=np.array([o.subject for o in obs], dtype=object))

    def subset(self, rows) -> "SurvDataset":
        """Rows ``rows`` (kept in unit order) sharing the same structure."""
        rows = np.asarray(rows)
        return replace(self, u=self.u[rows], a=self.a[rows], b=self.b[rows], X=self.X[rows],
                       unit=self.unit[rows], Z=None if self.Z is None else self.Z[rows],
                       subject=self.subject[rows])

    def original_X(self) -> np.ndarray:
        return self.X * self.x_sd + self.x_mean

    def original_Z(self) -> np.ndarray | None:
        if self.Z is None:
            return None
        return self.Z * self.z_sd + self.z_mean

    def scale_new(self, X_new) -> np.ndarray:
        """Map covariates given on the original scale to the internal scale."""
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        return (X_new - self.x_mean) / self.x_sd

    def scale_new_baseline(self, Z_new) -> np.ndarray:
        Z_new = np.atleast_2d(np.asarray(Z_new, dtype=float))
        return (Z_new - self.z_mean) / self.z_sd

    def unscale_coefficients(self, beta, intercept=None):
        """Coefficients on the original covariate scale.

        With an ``intercept`` the pair ``(intercept, beta)`` is returned with
        the intercept shifted by the centering offsets.
        """
        beta = np.asarray(beta, dtype=float)
        out = beta / self.x_sd
        if intercept is None:
            return out
        shift = np.sum(out * self.x_mean, axis=-1)
        return np.asarray(intercept) - shift, out

    def rescale_coefficients(self, beta):
        return np.asarray(beta, dtype=float) * self.x_sd


def _column_stats(M, names):
    mean = M.mean(axis=0)
    sd = M.std(axis=0, ddof=1) if M.shape[0] > 1 else np.zeros(M.shape[1])
    zero = [names[j] for j in np.flatnonzero(~(sd > 0))]
    if zero:
        raise ValidationError(f"zero-variance covariate(s): {', '.join(zero)}")
    return mean, sd


def standardize_covariates(ds: SurvDataset, enabled: bool = True) -> SurvDataset:
    """Center and scale every covariate column (sample sd, ``n - 1``).

    The returned dataset keeps the scaling so coefficients can be reported
    on the original scale.  ``enabled=False`` returns the data on the
    original scale with identity metadata.
    """
    X = ds.original_X()
    Z = ds.original_Z()
    if not enabled:
        return replace(ds, X=X, Z=Z, x_mean=np.zeros(ds.p), x_sd=np.ones(ds.p),
                       z_mean=None if Z is None else np.zeros(Z.shape[1]),
                       z_sd=None if Z is None else np.ones(Z.shape[1]))
    mean, sd = _column_stats(X, ds.covariate_names)
    out = replace(ds, X=(X - mean) / sd, x_mean=mean, x_sd=sd)
    if Z is not None:
        zm, zs = _column_stats(Z, ds.baseline_names)
        out = replace(out, Z=(Z - zm) / zs, z_mean=zm, z_sd=zs)
    return out


@dataclass
class Schema:
    """Column mapping for delimited input files.

    ``kind="right"`` reads ``time`` and ``status`` (``status`` equal to one of
    ``event_codes`` marks an exact event, anything else right censoring).
    ``kind="interval2"`` reads ``tleft``/``tright`` with empty, ``NA`` or
    ``Inf`` in ``tright`` meaning right censoring and a missing ``tleft``
    meaning left censoring.
    """

    kind: str = "right"
    time: str = "time"
    status: str = "status"
    event_codes: tuple = ("1",)
    tleft: str = "tleft"
    tright: str = "tright"
    truncation: str | None = None
    covariates: list[str] = field(default_factory=list)
    baseline: list[str] = field(default_factory=list)
    unit: str | None = None
    subject: str | None = None
    coords: list[str] = field(default_factory=list)
    delimiter: str = ","

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        d = dict(d or {})
        if "event_codes" in d:
            d["event_codes"] = tuple(str(c) for c in np.atleast_1d(d["event_codes"]))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


def _parse_time(token: str, row: int, column: str, missing: float) -> float:
    t = token.strip()
    if t.lower() in INF_TOKENS:
        return missing
    try:
        value = float(t)
    except ValueError:
        raise ValidationError(f"cannot parse {column}={token!r} as a time", row=row) from None
    if value < 0 or math.isnan(value):
        raise ValidationError(f"{column} must be nonnegative, got {token!r}", row=row)
    return value


def _parse_float(token: str, row: int, column: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise ValidationError(f"cannot parse {column}={token!r} as a number", row=row) from None


def _label_key(labels):
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def read_adjacency(path, delimiter=","):
    """Read an ``m x m`` 0/1 adjacency file whose header row holds unit labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    labels = [s.strip() for s in rows[0]]
    body = rows[1:]
    if body and len(body[0]) == len(labels) + 1:
        body = [r[1:] for r in body]
    E = np.array([[float(v) for v in r] for r in body])
    if E.shape != (len(labels), len(labels)):
        raise StructureError(f"adjacency has shape {E.shape}, expected {len(labels)} square")
    return labels, E


def load_dataset(path, schema: Schema | dict, adjacency=None) -> SurvDataset:
    """Read a delimited text file into a validated :class:`SurvDataset`.

    ``adjacency`` is either a path to an adjacency file or a ``(labels, E)``
    pair; when given, unit labels are joined against it.  With coordinate
    columns and no adjacency the dataset gets a georeferenced structure
    with one location per unit.
    """
    if isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        rows = list(reader)

    needed = list(schema.covariates) + list(schema.baseline) + list(schema.coords)
    needed += [schema.time, schema.status] if schema.kind == "right" else [schema.tleft, schema.tright]
    if schema.kind not in ("right", "interval2"):
        raise SchemaError(f"unknown schema kind {schema.kind!r}")
    for opt in (schema.truncation, schema.unit, schema.subject):
        if opt:
            needed.append(opt)
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")

    n = len(rows)
    u = np.zeros(n)
    a = np.zeros(n)
    b = np.zeros(n)
    for i, r in enumerate(rows):
        if schema.truncation:
            u[i] = _parse_time(r[schema.truncation], i, schema.truncation, 0.0)
        if schema.kind == "right":
            t = _parse_time(r[schema.time], i, schema.time, math.nan)
            if math.isnan(t):
                raise ValidationError(f"missing {schema.time}", row=i)
            event = r[schema.status].strip() in schema.event_codes
            a[i], b[i] = t, (t if event else math.inf)
        else:
            a[i] = _parse_time(r[schema.tleft], i, schema.tleft, u[i])
            b[i] = _parse_time(r[schema.tright], i, schema.tright, math.inf)
        if a[i] > b[i]:
            raise ValidationError(f"lower endpoint {a[i]} exceeds upper endpoint {b[i]}", row=i)
        if u[i] > a[i]:
            raise ValidationError(f"truncation time {u[i]} exceeds lower endpoint {a[i]}", row=i)

    X = np.array([[_parse_float(r[c], i, c) for c in schema.covariates]
                  for i, r in enumerate(rows)]).reshape(n, len(schema.covariates))
    Z = None
    if schema.baseline:
        Z = np.array([[_parse_float(r[c], i, c) for c in schema.baseline]
                      for i, r in enumerate(rows)]).reshape(n, len(schema.baseline))
    subject = np.array([r[schema.subject].strip() if schema.subject else str(i)
                        for i, r in enumerate(rows)], dtype=object)

    coords = None
    if schema.coords:
        coords = np.array([[_parse_float(r[c], i, c) for c in schema.coords]
                           for i, r in enumerate(rows)])
    raw_units = [r[schema.unit].strip() for r in rows] if schema.unit else None

    if adjacency is not None:
        labels, E = read_adjacency(adjacency) if not isinstance(adjacency, tuple) else adjacency
        labels = [str(s) for s in labels]
        if raw_units is None:
            raise SchemaError("an adjacency matrix requires a unit column")
        index = {lab: k for k, lab in enumerate(labels)}
        unknown = sorted({lab for lab in raw_units if lab not in index})
        if unknown:
            raise SpatialJoinError(f"unit labels not in adjacency: {unknown[:10]}")
        unit = np.array([index[lab] for lab in raw_units], dtype=int)
        structure = SpatialStructure.areal(E)
    elif raw_units is not None:
        labels = _label_key(set(raw_units))
        index = {lab: k for k, lab in enumerate(labels)}
        unit = np.array([index[lab] for lab in raw_units], dtype=int)
        if coords is not None:
            first = {}
            for i, k in enumerate(unit):
                first.setdefault(int(k), i)
            structure = SpatialStructure.geo(coords[[first[k] for k in range(len(labels))]])
        else:
            structure = SpatialStructure.clustered(len(labels))
    elif coords is not None:
        labels = [str(i) for i in range(n)]
        unit = np.arange(n)
        structure = SpatialStructure.geo(coords)
    else:
        labels = ["0"]
        unit = np.zeros(n, dtype=int)
        structure = SpatialStructure.none()

    order = np.argsort(unit, kind="stable")
    return SurvDataset(u=u[order], a=a[order], b=b[order], X=X[order], unit=unit[order],
                       covariate_names=list(schema.covariates), structure=structure,
                       Z=None if Z is None else Z[order], baseline_names=list(schema.baseline),
                       subject=subject[order], unit_labels=list(labels))


def canonical_schema(ds: SurvDataset) -> Schema:
    coords = [f"coord{k + 1}" for k in range(ds.structure.coords.shape[1])] \
        if ds.structure.kind == "geo" else []
    return Schema(kind="interval2", tleft="tleft", tright="tright", truncation="tstart",
                  covariates=list(ds.covariate_names), baseline=list(ds.baseline_names),
                  unit="unit", subject="subject", coords=coords)


def _fmt(v: float) -> str:
    return "Inf" if math.isinf(v) else repr(float(v))


def write_dataset(ds: SurvDataset, path) -> Schema:
    """Write ``ds`` in the canonical interval2 layout and return its schema.

    Covariates are written on the original scale.  For areal data the
    adjacency must be saved separately with :func:`write_adjacency`.
    """
    schema = canonical_schema(ds)
    labels = ds.unit_labels or [str(k) for k in range(ds.m)]
    X = ds.original_X()
    Z = ds.original_Z()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "unit", "tstart", "tleft", "tright", *ds.covariate_names,
                    *ds.baseline_names, *schema.coords])
        for i in range(ds.n):
            k = int(ds.unit[i])
            coord = [_fmt(c) for c in ds.structure.coords[k]] if schema.coords else []
            zrow = [_fmt(v) for v in Z[i]] if Z is not None else []
            w.writerow([ds.subject[i], labels[k], _fmt(ds.u[i]), _fmt(ds.a[i]), _fmt(ds.b[i]),
                        *[_fmt(v) for v in X[i]], *zrow, *coord])
    return schema


def write_adjacency(labels, E, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(labels)
        for row in np.asarray(E, dtype=int):
            w.writerow(row.tolist())


def episode_expand(records: Iterable[dict]) -> list[Observation]:
    """Split time-dependent covariate histories into left-truncated episodes.

    Each record is a mapping with keys ``subject``, ``tstart``, ``tstop``,
    ``event`` and ``x`` (optionally ``unit`` and ``z``).  Rows of a subject
    must tile ``[tstart_1, tstop_last]`` without gaps.  A non-final row
    becomes ``(u=tstart, (tstop, inf))``; the final row keeps its event
    status.  The product of the resulting likelihood terms telescopes to the
    survival of the piecewise-constant covariate path.
    """
    by_subject: dict = {}
    for rec in records:
        by_subject.setdefault(rec["subject"], []).append(rec)
    out = []
    for subj, rows in by_subject.items():
        rows = sorted(rows, key=lambda r: float(r["tstart"]))
        for k, r in enumerate(rows):
            final = k == len(rows) - 1
            t0, t1 = float(r["tstart"]), float(r["tstop"])
            if not t0 < t1:
                raise ValidationError(f"subject {subj}: tstart {t0} must precede tstop {t1}")
            if not final and float(rows[k + 1]["tstart"]) != t1:
                raise ValidationError(
                    f"subject {subj}: episodes are not contiguous at t={t1}")
            event = bool(r["event"])
            if event and not final:
                raise ValidationError(f"subject {subj}: event flagged on a non-final episode")
            interval = CensoredInterval(t1, t1 if event else math.inf)
            out.append(Observation(interval, r["x"], u=t0, z=r.get("z"),
                                   unit=int(r.get("unit", 0)), subject=str(subj)))
    return out
