"""AFT, PH and PO frailty models with a TBP baseline.

Covers the link functions, the arbitrarily censored and left-truncated
likelihood, and the g-prior used for spike-and-slab variable selection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .baseline import TbpState, tbp_log
from .errors import NumericalError, ValidationError
from .frailty import FrailtyState

LINKS = ("AFT", "PH", "PO")
DEGENERATE_TOL = 1e-12


def link_log(link: str, w, tag: str, theta, eta, t):
    """``(log S_x, log F_x, log f_x)`` at ``t`` for linear predictor ``eta``.

    ``w=None`` means the parametric centering baseline.  ``eta`` broadcasts
    against ``t``.
    """
    eta = np.asarray(eta, dtype=float)
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericalError("non-finite linear predictor")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if link == "AFT":
            lS0, lF0, lf0 = tbp_log(w, tag, theta, np.exp(eta) * t)
            return lS0, lF0, eta + lf0
        lS0, lF0, lf0 = tbp_log(w, tag, theta, t)
        if link == "PH":
            e = np.exp(eta)
            logS = e * lS0
            logF = np.log(-np.expm1(logS))
            logf = eta + (e - 1.0) * lS0 + lf0
            logf = np.where(e == 1.0, lf0, logf)
            return logS, logF, logf
        if link == "PO":
            denom = np.logaddexp(lF0, lS0 - eta)
            return lS0 - eta - denom, lF0 - denom, lf0 - eta - 2.0 * denom
    raise ValidationError(f"unknown link {link!r}; choose from {LINKS}")


def link_survival(link: str, baseline: TbpState, eta, t):
    """Survival ``S_x(t)`` and density ``f_x(t)`` under ``link``."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValidationError("survival evaluated at t <= 0")
    w = None if np.isinf(baseline.alpha) else baseline.w
    logS, _, logf = link_log(link, w, baseline.family.tag, baseline.family.theta, eta, t)
    return np.exp(logS), np.exp(logf)


def log_interval_prob(logS_a, logS_b):
    """``log(S(a) - S(b))`` computed relative to ``S(a)``."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return logS_a + np.log1p(-np.exp(logS_b - logS_a))


class CensoredLikelihood:
    """Per-observation log-likelihood for interval data ``(u, a, b]``.

    Index sets are computed once per dataset; :meth:`terms` is then called
    repeatedly by the sampler with new parameter values.  ``rows`` restricts
    evaluation to a subset of observations.
    """

    def __init__(self, u, a, b):
        self.u = np.asarray(u, dtype=float)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.n = self.a.size
        self.flags = np.zeros(self.n, dtype=bool)

    def terms(self, logfun, rows=None):
        """Evaluate with ``logfun(t, idx) -> (logS, logF, logf)``.

        ``idx`` gives the observation index of every entry of ``t`` so the
        caller can look up covariates and frailties.
        """
        if rows is None:
            rows = np.arange(self.n)
        u, a, b = self.u[rows], self.a[rows], self.b[rows]
        exact = a == b
        finite_b = ~exact & np.isfinite(b)
        trunc = u > 0
        k = rows.size
        t = np.concatenate([a, b[finite_b], u[trunc]])
        idx = np.concatenate([rows, rows[finite_b], rows[trunc]])
        logS, logF, logf = logfun(t, idx)
        lS_a, lf_a = logS[:k], logf[:k]
        nb = int(finite_b.sum())
        lS_b = logS[k:k + nb]
        lF_b = logF[k:k + nb]
        lS_u = logS[k + nb:]

        out = np.where(exact, lf_a, lS_a)
        if nb:
            left = a[finite_b] == 0
            interval = np.where(left, lF_b, log_interval_prob(lS_a[finite_b], lS_b))
            bad = ~np.isfinite(interval) | (interval < np.log(DEGENERATE_TOL) + lS_a[finite_b])
            bad &= ~left
            if np.any(bad):
                sub = np.flatnonzero(finite_b)[bad]
                mid = 0.5 * (a[sub] + b[sub])
                _, _, lf_mid = logfun(mid, rows[sub])
                fallback = lf_mid + np.log(b[sub] - a[sub])
                interval = interval.copy()
                interval[bad] = np.maximum(np.nan_to_num(interval[bad], nan=-np.inf), fallback)
                self.flags[rows[sub]] = True
            out[finite_b] = interval
        if lS_u.size:
            out[trunc] -= lS_u
        return out


@dataclass
class SurvregPriors:
    """Hyperparameters of the AFT/PH/PO frailty models.

    ``None`` entries are filled from the parametric initial fit.
    """

    L: int = 15
    beta0: np.ndarray | None = None
    S0: np.ndarray | None = None
    a0: float = 1.0
    b0: float = 1.0
    theta0: np.ndarray | None = None
    V0: np.ndarray | None = None
    a_tau: float = 0.001
    b_tau: float = 0.001
    a_phi: float = 2.0
    b_phi: float | None = None
    nu: float = 1.0
    M: float = 10.0
    q: float = 0.9
    K: int = 100
    B: int | None = None
    fsa_threshold: int = 300


@dataclass
class ModelSpec:
    """Link, current parameter values and priors of a survreg model."""

    link: str
    baseline: TbpState
    beta: np.ndarray
    frailty: FrailtyState | None = None
    gamma: np.ndarray | None = None
    priors: SurvregPriors = field(default_factory=SurvregPriors)

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValidationError(f"unknown link {self.link!r}; choose from {LINKS}")
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.gamma is None:
            self.gamma = np.ones(self.beta.size, dtype=int)
        self.gamma = np.asarray(self.gamma, dtype=int)
        if not np.all((self.gamma == 0) | (self.gamma == 1)):
            raise ValidationError("selection indicators must be 0 or 1")

    @property
    def w(self):
        return None if np.isinf(self.baseline.alpha) else self.baseline.w


def linear_predictor(X, beta, gamma=None, v=None, unit=None):
    coef = np.asarray(beta, dtype=float)
    if gamma is not None:
        coef = coef * gamma
    eta = np.asarray(X, dtype=float) @ coef if coef.size else np.zeros(len(X))
    if v is not None:
        eta = eta + np.asarray(v)[unit]
    return eta


def log_likelihood(ds, spec: ModelSpec):
    """Total and per-observation log-likelihood of ``spec`` on ``ds``."""
    if ds.p != spec.beta.size:
        raise ValidationError(f"beta has length {spec.beta.size}, dataset has p={ds.p}")
    v = spec.frailty.v if spec.frailty is not None else None
    eta = linear_predictor(ds.X, spec.beta, spec.gamma, v, ds.unit)
    fam = spec.baseline.family
    lik = CensoredLikelihood(ds.u, ds.a, ds.b)

    def logfun(t, idx):
        return link_log(spec.link, spec.w, fam.tag, fam.theta, eta[idx], t)

    per_obs = lik.terms(logfun)
    return float(per_obs.sum()), per_obs


def selection_g(M: float = 10.0, q: float = 0.9, p: int = 1) -> float:
    """g such that ``exp(x'beta) < M`` with probability about ``q``."""
    if not 0.5 < q < 1:
        raise ValidationError("q must lie in (0.5, 1)")
    return float((np.log(M) / special.ndtri(q)) ** 2 / p)


def selection_covariance(X, g: float) -> np.ndarray:
    """``g n (X'X)^{-1}`` for mean-centered ``X``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    XtX = Xc.T @ Xc
    rank = np.linalg.matrix_rank(XtX)
    if rank < XtX.shape[0]:
        _, _, vt = np.linalg.svd(XtX)
        null = vt[-1]
        cols = np.flatnonzero(np.abs(null) > 1e-8).tolist()
        raise ValidationError(f"collinear covariate columns {cols}; X'X is singular")
    return g * n * np.linalg.inv(XtX)


def selection_log_prior(beta, gamma, X, g: float, n: int | None = None) -> float:
    """Log g-prior density of ``beta`` plus the Bernoulli(0.5) indicator mass.

    ``X`` must be column-centered.  ``gamma`` does not enter the Gaussian
    term.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = np.asarray(X, dtype=float)
    n = X.shape[0] if n is None else n
    XtX = X.T @ X
    if np.linalg.matrix_rank(XtX) < XtX.shape[0]:
        selection_covariance(X, g)
    p = beta.size
    prec = XtX / (g * n)
    _, logdet_prec = np.linalg.slogdet(prec)
    quad = beta @ prec @ beta
    return float(-0.5 * p * np.log(2 * np.pi) + 0.5 * logdet_prec - 0.5 * quad + p * np.log(0.5))
