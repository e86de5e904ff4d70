"""ICAR, IID and Gaussian random field frailty priors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist, pdist

from .errors import NumericalError, StructureError, ValidationError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FrailtyState:
    """Current frailty vector with its variance and (GRF only) range."""

    kind: str
    v: np.ndarray
    tau2: float
    phi: float | None = None
    nu: float = 1.0

    def __post_init__(self):
        if self.kind not in ("car", "iid", "grf"):
            raise ValidationError(f"unknown frailty prior {self.kind!r}")
        self.v = np.asarray(self.v, dtype=float)
        if not self.tau2 > 0:
            raise ValidationError("frailty variance tau2 must be positive")
        if self.kind == "grf" and not (0 < self.nu <= 2):
            raise ValidationError("powered exponential shape nu must lie in (0, 2]")


def icar_conditional(i: int, v, E, tau2: float):
    """Mean and variance of ``v_i`` given the other frailties under ICAR."""
    E = np.asarray(E)
    e_plus = E[i].sum()
    if e_plus < 1:
        raise StructureError(f"region {i} has no neighbors")
    return float(E[i] @ np.asarray(v)) / e_plus, tau2 / e_plus


def icar_precision(E) -> np.ndarray:
    """Structure matrix ``D - E``."""
    E = np.asarray(E, dtype=float)
    return np.diag(E.sum(axis=1)) - E


def check_connected(E):
    ncomp, _ = connected_components(np.asarray(E) != 0, directed=False)
    if ncomp != 1:
        raise StructureError(
            f"adjacency graph has {ncomp} connected components; the ICAR prior needs one")


def icar_quadratic(v, E) -> float:
    v = np.asarray(v, dtype=float)
    return float(v @ icar_precision(E) @ v)


def icar_log_density(v, E, tau2: float) -> float:
    """Log ICAR density up to the improper normalizer, rank ``m - 1``."""
    check_connected(E)
    m = len(v)
    return 0.5 * (m - 1) * np.log(1.0 / tau2) - icar_quadratic(v, E) / (2.0 * tau2)


def iid_log_density(v, tau2: float) -> float:
    v = np.asarray(v, dtype=float)
    if not tau2 > 0:
        raise ValidationError("tau2 must be positive")
    return float(-0.5 * v.size * (LOG_2PI + np.log(tau2)) - 0.5 * (v @ v) / tau2)


def grf_correlation(s, s2, phi: float, nu: float = 1.0):
    """Powered exponential correlation ``exp(-(phi * ||s - s2||)^nu)``."""
    d = np.linalg.norm(np.atleast_1d(np.asarray(s, float) - np.asarray(s2, float)), axis=-1)
    return np.exp(-(phi * d) ** nu)


def correlation_matrix(coords, phi: float, nu: float = 1.0, other=None) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    D = cdist(coords, coords if other is None else np.asarray(other, dtype=float))
    return np.exp(-(phi * D) ** nu)


def grf_conditional(i: int, v, precision, tau2: float):
    """Conditional mean and variance of ``v_i`` from a correlation precision.

    ``precision`` is a dense ``R^{-1}`` or any object with a
    ``precision_column(i)`` method (an FSA plan).
    """
    v = np.asarray(v, dtype=float)
    if hasattr(precision, "precision_column"):
        col = precision.precision_column(i)
    else:
        col = np.asarray(precision)[:, i]
    p_ii = col[i]
    if not p_ii > 0:
        raise NumericalError("non-positive diagonal precision; correlation matrix not PD")
    rest = col @ v - p_ii * v[i]
    return float(-rest / p_ii), tau2 / p_ii


def dense_precision(R) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of a dense correlation matrix."""
    try:
        c, low = linalg.cho_factor(R, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"correlation matrix is not positive definite: {exc}") from None
    P = linalg.cho_solve((c, low), np.eye(R.shape[0]))
    return P, 2.0 * float(np.sum(np.log(np.diag(c))))


def phi0_default(coords, nu: float = 1.0) -> float:
    """Range giving correlation 0.001 at the largest inter-point distance."""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    dmax = pdist(coords).max() if coords.shape[0] > 1 else 0.0
    if not dmax > 0:
        raise ValidationError("phi0 needs at least two distinct locations")
    return float((-np.log(0.001)) ** (1.0 / nu) / dmax)


def phi_prior_default(coords, nu: float = 1.0, a_phi: float = 2.0):
    """Gamma(a, b) prior on the range with mode at ``phi0``."""
    return a_phi, (a_phi - 1.0) / phi0_default(coords, nu)


def tau2_full_conditional(v, kind: str, a_tau: float, b_tau: float, E=None, precision=None):
    """Shape and rate of the gamma full conditional of ``1 / tau2``."""
    v = np.asarray(v, dtype=float)
    m = v.size
    if kind == "car":
        r, Q = m - 1, icar_quadratic(v, E)
    elif kind == "iid":
        r, Q = m, float(v @ v)
    elif kind == "grf":
        if hasattr(precision, "solve"):
            Q = float(v @ precision.solve(v))
        else:
            Q = float(v @ np.asarray(precision) @ v)
        r = m
    else:
        raise ValidationError(f"unknown frailty prior {kind!r}")
    if Q < -1e-10 * max(1.0, abs(Q)):
        raise NumericalError(f"negative frailty quadratic form {Q}")
    return a_tau + 0.5 * r, b_tau + 0.5 * max(Q, 0.0)


def tau2_gibbs(v, kind: str, a_tau: float, b_tau: float, rng, E=None, precision=None) -> float:
    """Draw ``tau2`` through its conjugate gamma update of ``1 / tau2``."""
    shape, rate = tau2_full_conditional(v, kind, a_tau, b_tau, E=E, precision=precision)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def greedy_coloring(E) -> list[np.ndarray]:
    """Partition regions so that no two neighbors share a class.

    Regions in one class are conditionally independent under ICAR and can
    be updated together.
    """
    E = np.asarray(E) != 0
    m = E.shape[0]
    color = -np.ones(m, dtype=int)
    for i in np.argsort(-E.sum(axis=1), kind="stable"):
        used = set(color[E[i]].tolist())
        c = 0
        while c in used:
            c += 1
        color[i] = c
    return [np.flatnonzero(color == c) for c in range(color.max() + 1)]
