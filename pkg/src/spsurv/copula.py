"""Spatial Gaussian copula survival models.

Event times at distinct locations are joined by a Gaussian copula with
correlation ``R = theta1 * exp(-theta2 * d) + (1 - theta1) * I``.  Two
marginal models are supported: a piecewise-exponential PH model and the
linear dependent Dirichlet process mixture of lognormal regressions
(LDDPM).  Right-censored times are imputed from their conditional
distribution given the other normal scores, so every sampler step works
with the complete-data likelihood.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, special, stats

from .errors import NumericalError, ValidationError
from .fsa import FsaPlan, build_fsa, fsa_design
from .frailty import correlation_matrix
from .mcmc import AdaptiveProposal, ChainConfig, PosteriorChain, adaptive_mh_step

log = logging.getLogger("spsurv")

COPULA_MODELS = ("copula-coxph", "indept-coxph", "copula-ddp", "anova-ddp")
Z_CLAMP = 8.0


# --------------------------------------------------------------------------
# Copula correlation and likelihood
# --------------------------------------------------------------------------

@dataclass
class CopulaParams:
    """Partial sill ``theta1`` in [0, 1] and decay ``theta2 > 0``."""

    theta1: float
    theta2: float

    def __post_init__(self):
        self.theta1 = float(self.theta1)
        self.theta2 = float(self.theta2)
        if not 0.0 <= self.theta1 <= 1.0:
            raise ValidationError("theta1 must lie in [0, 1]")
        if not self.theta2 > 0:
            raise ValidationError("theta2 must be positive")

    @property
    def nugget(self) -> float:
        # A vanishing nugget makes R singular at coincident knots; keep a
        # floor matching the frailty FSA.
        return max(1.0 - self.theta1, 1e-10)

    def matrix(self, coords) -> np.ndarray:
        """Dense ``R``; the diagonal is exactly one."""
        coords = np.asarray(coords, dtype=float)
        R = self.theta1 * correlation_matrix(coords, self.theta2, 1.0)
        R[np.diag_indices_from(R)] = 1.0
        return R


class CopulaCorrelation:
    """``R`` for the current ``(theta1, theta2)`` with cached factorizations.

    Dense Cholesky for ``n <= fsa_threshold``, otherwise the full-scale
    approximation with nugget ``1 - theta1``.  Knots and blocks are chosen
    once and reused as the parameters change.
    """

    def __init__(self, coords, params: CopulaParams, *, fsa_threshold: int = 300, K: int = 100,
                 B: int | None = None, rng=None, design=None):
        self.coords = np.asarray(coords, dtype=float)
        self.n = self.coords.shape[0]
        self.use_fsa = self.n > fsa_threshold
        self.design = design
        if self.use_fsa and design is None:
            self.design = fsa_design(self.coords, K, B, rng=rng)
        self._set(params)

    def _set(self, params: CopulaParams):
        self.params = params
        self._P = None
        if params.theta1 == 0.0:
            self.kind = "identity"
            self.logdet = 0.0
            return
        if self.use_fsa:
            self.kind = "fsa"
            knots, blocks = self.design
            self.plan = build_fsa(self.coords, params.theta2, 1.0, eps=params.nugget,
                                  knots=knots, blocks=blocks)
            self.logdet = self.plan.logdet()
        else:
            self.kind = "dense"
            R = params.matrix(self.coords)
            if params.theta1 == 1.0:
                R[np.diag_indices_from(R)] += 1e-10
            try:
                self.chol = linalg.cholesky(R, lower=True)
            except linalg.LinAlgError:
                raise NumericalError("copula correlation matrix is not positive definite") from None
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def with_params(self, params: CopulaParams) -> "CopulaCorrelation":
        new = object.__new__(CopulaCorrelation)
        new.coords, new.n, new.use_fsa, new.design = self.coords, self.n, self.use_fsa, self.design
        new._set(params)
        return new

    def solve(self, z) -> np.ndarray:
        if self.kind == "identity":
            return np.array(z, dtype=float)
        if self.kind == "fsa":
            return self.plan.solve(z)
        return linalg.cho_solve((self.chol, True), z)

    def quad(self, z) -> float:
        """``z' R^{-1} z``."""
        z = np.asarray(z, dtype=float)
        return float(z @ self.solve(z))

    def precision(self) -> np.ndarray:
        """Dense ``R^{-1}`` (cached)."""
        if self._P is None:
            if self.kind == "identity":
                self._P = np.eye(self.n)
            elif self.kind == "fsa":
                self._P = self.plan.precision()
            else:
                P = linalg.cho_solve((self.chol, True), np.eye(self.n))
                self._P = 0.5 * (P + P.T)
        return self._P


def clamp_scores(z):
    """Clamp normal scores to ``[-8, 8]``; returns ``(z, number_clamped)``."""
    z = np.asarray(z, dtype=float)
    bad = ~(np.abs(z) <= Z_CLAMP)
    if not np.any(bad):
        return z, 0
    if np.any(np.isnan(z)):
        raise NumericalError("normal score is NaN")
    return np.clip(z, -Z_CLAMP, Z_CLAMP), int(bad.sum())


def normal_scores(logS, logF):
    """``Phi^{-1}(F)`` using whichever tail probability is smaller."""
    logS = np.asarray(logS, dtype=float)
    logF = np.asarray(logF, dtype=float)
    with np.errstate(over="ignore", under="ignore"):
        lower = special.ndtri(np.exp(logF))
        upper = -special.ndtri(np.exp(logS))
    return np.where(logF < logS, lower, upper)


def copula_term(z, R) -> float:
    """``-0.5 log|R| - 0.5 z'(R^{-1} - I) z`` for ``R`` dense, FSA or cached."""
    z = np.asarray(z, dtype=float)
    if isinstance(R, CopulaCorrelation):
        logdet, quad = R.logdet, R.quad(z)
    elif isinstance(R, FsaPlan):
        logdet, quad = R.logdet(), float(z @ R.solve(z))
    else:
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if R.shape != (z.size, z.size):
            raise ValidationError("R must be n x n")
        try:
            c = linalg.cholesky(R, lower=True)
        except linalg.LinAlgError:
            raise NumericalError("copula correlation matrix is not positive definite") from None
        logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
        quad = float(z @ linalg.cho_solve((c, True), z))
    return -0.5 * logdet - 0.5 * (quad - float(z @ z))


def copula_loglik(z, R, marginal_logdens) -> float:
    """Complete-data log-likelihood of the Gaussian copula model.

    Parameters
    ----------
    z : (n,) array
        Normal scores ``Phi^{-1}(F_i(t_i))``; values beyond +/-8 are clamped
        with a warning.
    R : ndarray, FsaPlan or CopulaCorrelation
        Copula correlation.  An :class:`FsaPlan` should carry nugget
        ``1 - theta1``.
    marginal_logdens : (n,) array
        ``log f_i(t_i)``.
    """
    z, nclamp = clamp_scores(z)
    if nclamp:
        warnings.warn(f"{nclamp} normal scores clamped to +/-{Z_CLAMP:g}", RuntimeWarning,
                      stacklevel=2)
    md = np.asarray(marginal_logdens, dtype=float)
    if md.shape != z.shape:
        raise ValidationError("marginal log densities must match the normal scores")
    return copula_term(z, R) + float(md.sum())


# --------------------------------------------------------------------------
# Piecewise-exponential PH marginal
# --------------------------------------------------------------------------

@dataclass
class PiecewiseExpBaseline:
    """Constant hazard ``h_k`` on ``(d_{k-1}, d_k]`` with ``d_0 = 0``, ``d_M = inf``."""

    cutpoints: np.ndarray
    hazards: np.ndarray

    def __post_init__(self):
        self.cutpoints = np.asarray(self.cutpoints, dtype=float)
        self.hazards = np.atleast_1d(np.asarray(self.hazards, dtype=float))
        d = self.cutpoints
        if d.size < 2 or d[0] != 0.0 or not np.isinf(d[-1]):
            raise ValidationError("cutpoints must run from 0 to inf")
        if np.any(np.diff(d) <= 0):
            raise ValidationError("cutpoints must be strictly increasing")
        if self.hazards.size != d.size - 1:
            raise ValidationError(f"need {d.size - 1} hazards, got {self.hazards.size}")
        if np.any(~(self.hazards > 0)):
            raise ValidationError("hazards must be positive")

    @property
    def M(self) -> int:
        return self.hazards.size

    def cumulative_hazard(self, t):
        """``(Lambda0(t), lambda0(t))``."""
        t = np.asarray(t, dtype=float)
        if np.any(~(t > 0)):
            raise ValidationError("piecewise-exponential baseline evaluated at t <= 0")
        d = self.cutpoints
        inner = d[1:-1]
        k = np.searchsorted(inner, t, side="left")  # interval index M(t) - 1
        full = np.concatenate([[0.0], np.cumsum(self.hazards[:-1] * np.diff(d[:-1]))])
        Lam = full[k] + self.hazards[k] * (t - d[k])
        return Lam, self.hazards[k]

    def inverse_cumulative_hazard(self, H):
        """``t`` with ``Lambda0(t) = H`` (closed form)."""
        H = np.asarray(H, dtype=float)
        d = self.cutpoints
        full = np.concatenate([[0.0], np.cumsum(self.hazards[:-1] * np.diff(d[:-1]))])
        k = np.clip(np.searchsorted(full, H, side="right") - 1, 0, self.M - 1)
        return d[k] + (H - full[k]) / self.hazards[k]


def pe_cutpoints(times, M: int = 10) -> np.ndarray:
    """Cutpoints at the empirical ``k/M`` quantiles (linear interpolation).

    Coincident quantiles are merged, which reduces ``M`` with a warning.
    """
    times = np.asarray(times, dtype=float)
    if int(M) != M or M < 1:
        raise ValidationError("M must be a positive integer")
    if times.size == 0:
        raise ValidationError("no observed times")
    if M == 1:
        return np.array([0.0, np.inf])
    q = np.quantile(times, np.arange(1, M) / M)
    inner = np.unique(q[q > 0])
    if inner.size < M - 1:
        warnings.warn(f"tied quantiles: using {inner.size + 1} intervals instead of {M}",
                      RuntimeWarning, stacklevel=2)
    return np.concatenate([[0.0], inner, [np.inf]])


def pe_log(baseline: PiecewiseExpBaseline, eta, t):
    """``(log S, log F, log f)`` of the PH model with baseline ``baseline``."""
    Lam, lam = baseline.cumulative_hazard(t)
    eta = np.asarray(eta, dtype=float)
    H = Lam * np.exp(eta)
    logS = -H
    with np.errstate(divide="ignore"):
        logF = np.log(-np.expm1(-H))
    return logS, logF, np.log(lam) + eta - H


def pe_eval(baseline: PiecewiseExpBaseline, eta, t):
    """``(F, f)`` of the PH model with baseline ``baseline``."""
    logS, _, logf = pe_log(baseline, eta, t)
    return -np.expm1(logS), np.exp(logf)


def pe_inverse(baseline: PiecewiseExpBaseline, eta, z) -> np.ndarray:
    """Times whose normal score is ``z``."""
    logS = special.log_ndtr(-np.asarray(z, dtype=float))
    return baseline.inverse_cumulative_hazard(-logS * np.exp(-np.asarray(eta, dtype=float)))


def exponential_ph_fit(t, delta, X, max_iter: int = 100):
    """Newton-Raphson ML fit of ``h(t | x) = h exp(x'beta)``.

    Returns ``(h, beta, cov)`` where ``cov`` is the inverse information for
    ``(log h, beta)``.
    """
    t = np.asarray(t, dtype=float)
    delta = np.asarray(delta, dtype=float)
    Z = np.column_stack([np.ones(t.size), np.asarray(X, dtype=float).reshape(t.size, -1)])
    if delta.sum() == 0:
        raise ValidationError("no events: the exponential PH fit is undefined")
    par = np.zeros(Z.shape[1])
    par[0] = np.log(delta.sum() / t.sum())

    def ll(pr):
        e = Z @ pr
        return float(delta @ e - np.sum(t * np.exp(e)))

    cur = ll(par)
    for _ in range(max_iter):
        mu = t * np.exp(Z @ par)
        grad = Z.T @ (delta - mu)
        H = Z.T @ (mu[:, None] * Z)
        step = np.linalg.solve(H, grad)
        s, val = 1.0, -np.inf
        while s > 1e-10:
            val = ll(par + s * step)
            if np.isfinite(val) and val >= cur - 1e-12:
                break
            s *= 0.5
        if not np.isfinite(val) or val < cur - 1e-12:
            break
        par, old, cur = par + s * step, cur, val
        if abs(cur - old) < 1e-12 * (1 + abs(cur)):
            break
    mu = t * np.exp(Z @ par)
    cov = np.linalg.inv(Z.T @ (mu[:, None] * Z))
    return float(np.exp(par[0])), par[1:], cov


# --------------------------------------------------------------------------
# LDDPM marginal
# --------------------------------------------------------------------------

def stick_break(V) -> np.ndarray:
    """Weights ``w_k = V_k prod_{j<k}(1 - V_j)``; the last stick is forced to 1."""
    V = np.atleast_1d(np.asarray(V, dtype=float)).copy()
    V[-1] = 1.0
    rest = np.concatenate([[1.0], np.cumprod(1.0 - V[:-1])])
    w = V * rest
    # Forcing the sum can leave the remainder at -eps after rounding.
    w[-1] = max(1.0 - w[:-1].sum(), 0.0) if w.size > 1 else 1.0
    return w


@dataclass
class DdpState:
    """Truncated stick-breaking mixture of lognormal regressions.

    ``beta`` has one row per atom and includes the intercept; ``V`` holds
    the ``N`` stick variables with ``V[-1] = 1``.
    """

    V: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    alpha: float = 1.0
    mu: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    kappa0: float = 7.0
    Sigma0: np.ndarray | None = None
    nu_a: float = 3.0
    nu_b: float = 1.0

    def __post_init__(self):
        self.V = np.atleast_1d(np.asarray(self.V, dtype=float)).copy()
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        N = self.V.size
        if self.beta.shape[0] != N or self.sigma2.size != N:
            raise ValidationError("V, beta and sigma2 must have one entry per atom")
        if np.any((self.V[:-1] <= 0) | (self.V[:-1] >= 1)):
            raise ValidationError("stick variables must lie in (0, 1)")
        if np.any(~(self.sigma2 > 0)):
            raise ValidationError("atom variances must be positive")
        self.V[-1] = 1.0

    @property
    def N(self) -> int:
        return self.V.size

    @property
    def w(self) -> np.ndarray:
        return stick_break(self.V)


def _lse_rows(a, axis=1):
    # Row-wise log-sum-exp; scipy's version carries noticeable call overhead.
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


def _ddp_design(x, p1):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] == p1 - 1:
        x = np.column_stack([np.ones(x.shape[0]), x])
    if x.shape[1] != p1:
        raise ValidationError(f"covariate rows need {p1 - 1} columns (or {p1} with intercept)")
    return x


def lddpm_log(state: DdpState, x, t):
    """``(log S, log F, log f)`` of the LDDPM at ``t`` for design rows ``x``.

    ``x`` rows may include the leading intercept or not; ``t`` broadcasts
    against the rows of ``x`` and the results are one-dimensional.
    """
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValidationError("LDDPM evaluated at t <= 0")
    Xd = _ddp_design(x, state.beta.shape[1])
    y = np.log(t)
    sd = np.sqrt(state.sigma2)
    with np.errstate(divide="ignore"):
        logw = np.log(state.w)
    u = (np.atleast_1d(y)[:, None] - Xd @ state.beta.T) / sd
    logF = _lse_rows(logw + special.log_ndtr(u), axis=1)
    logS = _lse_rows(logw + special.log_ndtr(-u), axis=1)
    logf = _lse_rows(logw - 0.5 * u ** 2 - 0.5 * np.log(2 * np.pi) - np.log(sd),
                             axis=1) - np.atleast_1d(y)
    return logS, logF, logf


def lddpm_eval(state: DdpState, x, t):
    """``(F, f)`` of the LDDPM for design rows ``x`` at times ``t``."""
    _, logF, logf = lddpm_log(state, x, t)
    return np.exp(logF), np.exp(logf)


def lddpm_inverse(state: DdpState, x, z, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Times whose normal score under the LDDPM is ``z`` (bisection on log t).

    The bracket is spanned by the component quantiles, and bisection stops
    once the cdf is within ``tol`` of the target probability.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    Xd = _ddp_design(x, state.beta.shape[1])
    loc = Xd @ state.beta.T
    sd = np.sqrt(state.sigma2)
    q = loc + sd * z[:, None]
    lo, hi = q.min(axis=1) - 1e-9, q.max(axis=1) + 1e-9
    upper = z > 0
    target = np.where(upper, special.log_ndtr(-z), special.log_ndtr(z))
    with np.errstate(divide="ignore"):
        logw = np.log(state.w)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        u = (mid[:, None] - loc) / sd
        lF = _lse_rows(logw + special.log_ndtr(u), axis=1)
        lS = _lse_rows(logw + special.log_ndtr(-u), axis=1)
        # F(mid) below target  <=>  the root lies above mid
        below = np.where(upper, lS > target, lF < target)
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        gap = np.abs(np.exp(np.where(upper, lS, lF)) - np.exp(target))
        if np.all(gap < tol) or np.all(hi - lo < 1e-14 * (1 + np.abs(mid))):
            break
    return np.exp(0.5 * (lo + hi))


# --------------------------------------------------------------------------
# Imputation of censored times
# --------------------------------------------------------------------------

def _tail_normal(alpha: float, rng) -> float:
    """Standard normal conditioned on exceeding ``alpha``."""
    if alpha < 8.0:
        q = rng.uniform() * special.ndtr(-alpha)
        if q > 0:
            return max(float(-special.ndtri(q)), alpha)
    # Exponential rejection sampler for the far tail
    a = 0.5 * (alpha + np.sqrt(alpha * alpha + 4.0))
    while True:
        x = alpha + rng.exponential(1.0 / a)
        if np.log(rng.uniform()) <= -0.5 * (x - a) ** 2:
            return float(x)


def truncated_conditional_draws(z, lower, censored, rng, precision=None) -> np.ndarray:
    """Sequentially redraw ``z[censored]`` from ``N(cond. mean, cond. var)`` on ``(lower, inf)``.

    ``precision=None`` means independence (``R = I``).
    """
    z = np.array(z, dtype=float)
    censored = np.asarray(censored, dtype=int)
    lower = np.asarray(lower, dtype=float)
    if precision is None:
        for i, lo in zip(censored, lower):
            z[i] = _tail_normal(lo, rng)
        return z
    P = np.asarray(precision, dtype=float)
    r = P @ z
    for i, lo in zip(censored, lower):
        pii = P[i, i]
        if not pii > 0:
            raise NumericalError(f"conditional variance of score {i} is not positive")
        sd = 1.0 / np.sqrt(pii)
        mean = z[i] - r[i] / pii
        new = mean + sd * _tail_normal((lo - mean) / sd, rng)
        r += P[:, i] * (new - z[i])
        z[i] = new
    return z


def impute_censored(z, t, t_obs, censored, lower, inverse, rng, precision=None):
    """Impute right-censored event times given the other normal scores.

    Parameters
    ----------
    z, t : (n,) arrays
        Current normal scores and complete event times.
    t_obs : (n,) array
        Observed (censoring) times.
    censored : int array
        Indices of right-censored observations.
    lower : array
        ``Phi^{-1}(F_i(t_obs_i))`` for the censored indices.
    inverse : callable
        ``inverse(z_sub, idx)`` maps scores back to times.
    precision : (n, n) array or None
        ``R^{-1}``; ``None`` for independence.

    Returns
    -------
    (z, t) with censored entries replaced; ``t > t_obs`` on those entries.
    """
    censored = np.asarray(censored, dtype=int)
    z = truncated_conditional_draws(z, lower, censored, rng, precision)
    t = np.array(t, dtype=float)
    if censored.size:
        new = inverse(z[censored], censored)
        t[censored] = np.maximum(new, np.nextafter(t_obs[censored], np.inf))
    return z, t


# --------------------------------------------------------------------------
# Priors and samplers
# --------------------------------------------------------------------------

@dataclass
class CopulaPriors:
    """Hyperparameters of the copula and independent PH/LDDPM models.

    ``None`` entries are filled from the exponential-PH or lognormal-AFT
    fits.
    """

    M: int = 10
    r0: float = 1.0
    h0: float | None = None
    beta0: np.ndarray | None = None
    S0: np.ndarray | None = None
    theta0: tuple = (1.0, 1.0, 1.0, 1.0)
    N: int = 10
    a0: float = 2.0
    b0: float = 2.0
    nu_a: float = 3.0
    nu_b: float | None = None
    m0: np.ndarray | None = None
    S0_ddp: np.ndarray | None = None
    kappa0: float = 7.0
    Sigma0: np.ndarray | None = None
    K: int = 100
    B: int | None = None
    fsa_threshold: int = 300


def _validate_copula_data(ds, spatial: bool):
    if np.any(ds.u > 0):
        raise ValidationError("copula and independent PH/LDDPM fits do not support truncation")
    exact = ds.a == ds.b
    right = np.isinf(ds.b)
    if np.any(~(exact | right)):
        raise ValidationError("copula and independent PH/LDDPM fits accept only "
                              "right-censored data")
    if np.any(~(ds.a > 0)):
        raise ValidationError("observed times must be positive")
    if spatial:
        st = ds.structure
        if st.kind != "geo":
            raise ValidationError("copula models require coordinates")
        if ds.m != ds.n or np.unique(ds.unit).size != ds.n:
            raise ValidationError("copula models need one observation per location")
        return np.asarray(st.coords, dtype=float)[ds.unit]
    return None


def _theta_log_prior(x, theta0):
    """Log prior of ``(logit theta1, log theta2)`` including the Jacobian."""
    a1, b1, a2, b2 = theta0
    lt1 = -np.logaddexp(0.0, -x[0])   # log theta1
    l1t1 = -np.logaddexp(0.0, x[0])   # log(1 - theta1)
    th2 = np.exp(x[1])
    return float(a1 * lt1 + b1 * l1t1 - special.betaln(a1, b1)
                 + a2 * np.log(b2) - special.gammaln(a2) + a2 * x[1] - b2 * th2)


def _theta_from(x) -> CopulaParams:
    return CopulaParams(float(special.expit(x[0])), float(np.exp(x[1])))


class _CopulaLayer:
    """Shared state of the spatial copula: scores, ``R`` and imputation."""

    def __init__(self, coords, priors: CopulaPriors, rng):
        self.theta0 = priors.theta0
        x0 = np.array([0.0, np.log(_default_theta2(coords))])
        self.x = x0
        self.R = CopulaCorrelation(coords, _theta_from(x0), fsa_threshold=priors.fsa_threshold,
                                   K=priors.K, B=priors.B, rng=rng)
        self.prop = AdaptiveProposal(0.16 * np.eye(2))
        self.clamped = 0
        self.acc = 0
        self.tries = 0

    def term(self, z, R=None) -> float:
        zc, nclamp = clamp_scores(z)
        self.clamped += nclamp
        return copula_term(zc, self.R if R is None else R)

    def update(self, z, rng, post):
        cache = {}

        def lp(x):
            if not (np.all(np.isfinite(x)) and abs(x[0]) < 30 and abs(x[1]) < 30):
                return -np.inf
            try:
                R = self.R.with_params(_theta_from(x))
            except NumericalError:
                return -np.inf
            cache[x.tobytes()] = R
            return self.term(z, R) + _theta_log_prior(x, self.theta0)
        new, ok, _ = adaptive_mh_step(self.x, lp, self.prop, rng,
                                      self.term(z) + _theta_log_prior(self.x, self.theta0))
        if ok:
            self.x = new
            self.R = cache[new.tobytes()]
        self.acc += ok and post
        self.tries += post

    @property
    def params(self) -> CopulaParams:
        return self.R.params


def _default_theta2(coords) -> float:
    """Decay giving correlation 0.05 at the median inter-point distance."""
    c = np.asarray(coords, dtype=float)
    sub = c[:: max(1, c.shape[0] // 500)]
    d = linalg.norm(sub[:, None, :] - sub[None, :, :], axis=-1)
    med = np.median(d[np.triu_indices_from(d, 1)]) if sub.shape[0] > 1 else 1.0
    return float(-np.log(0.05) / med) if med > 0 else 1.0


def run_copula(ds, config: ChainConfig, model: str = "copula-coxph",
               priors: CopulaPriors | None = None) -> PosteriorChain:
    """Sampler for the copula and independent PH / LDDPM survival models."""
    if model not in COPULA_MODELS:
        raise ValidationError(f"unknown model {model!r}; choose from {COPULA_MODELS}")
    pr = priors or CopulaPriors()
    if model.endswith("coxph"):
        return _run_coxph(ds, config, pr, spatial=model == "copula-coxph")
    return _run_ddp(ds, config, pr, spatial=model == "copula-ddp")


def _save_due(it, config):
    return it >= config.nburn and (it - config.nburn) % (config.nskip + 1) == config.nskip


def _run_coxph(ds, config: ChainConfig, pr: CopulaPriors, spatial: bool) -> PosteriorChain:
    coords = _validate_copula_data(ds, spatial)
    rng = np.random.default_rng(config.seed)
    n, p = ds.n, ds.p
    t_obs = ds.a.copy()
    delta = (ds.a == ds.b).astype(float)
    cens = np.flatnonzero(delta == 0)
    X = ds.X

    cut = pe_cutpoints(t_obs, pr.M)
    M = cut.size - 1
    h_hat, beta_hat, cov_hat = exponential_ph_fit(t_obs, delta, X)
    h0 = h_hat if pr.h0 is None else pr.h0
    beta0 = np.zeros(p) if pr.beta0 is None else np.broadcast_to(pr.beta0, (p,)).astype(float)
    S0 = 1e5 * np.eye(p) if pr.S0 is None else np.atleast_2d(pr.S0)
    S0_inv = np.linalg.inv(S0) if p else np.zeros((0, 0))
    shape_h, rate_h = pr.r0 * h0, pr.r0

    beta = beta_hat.copy()
    logh = np.full(M, np.log(h_hat))
    k_obs = np.searchsorted(cut[1:-1], t_obs, side="left")
    events = np.bincount(k_obs[delta == 1], minlength=M)

    def base(lh):
        return PiecewiseExpBaseline(cut, np.exp(lh))

    def prior(b_, lh):
        r = b_ - beta0
        return float(-0.5 * r @ S0_inv @ r + np.sum(shape_h * lh - rate_h * np.exp(lh)))

    layer = _CopulaLayer(coords, pr, rng) if spatial else None
    t = t_obs.copy()
    if layer is not None and cens.size:
        # Start from independent imputations.
        lS, lF, _ = pe_log(base(logh), X[cens] @ beta, t_obs[cens])
        z0 = normal_scores(lS, lF)
        _, t = impute_censored(np.zeros(n), t, t_obs, cens, z0,
                               lambda zz, idx: pe_inverse(base(logh), X[idx] @ beta, zz), rng)

    def observed_terms(b_, lh):
        lS, _, lf = pe_log(base(lh), X @ b_, t_obs)
        return np.where(delta == 1, lf, lS)

    def complete(b_, lh):
        """(log posterior kernel without prior, z) on the complete data."""
        lS, lF, lf = pe_log(base(lh), X @ b_, t)
        z = normal_scores(lS, lF)
        return float(lf.sum()) + layer.term(z), z

    def target(b_, lh):
        if layer is None:
            return float(observed_terms(b_, lh).sum())
        return complete(b_, lh)[0]

    props = {"h": AdaptiveProposal(np.diag(1.0 / np.maximum(events, 1.0)))}
    if p:
        props["beta"] = AdaptiveProposal(cov_hat[1:, 1:])
    acc = {b: 0 for b in props}
    tries = {b: 0 for b in props}

    nsave = config.nsave
    out = {"beta": np.empty((nsave, p)), "h": np.empty((nsave, M))}
    if spatial:
        out["theta1"] = np.empty(nsave)
        out["theta2"] = np.empty(nsave)
    ll_out = np.empty((nsave, n))
    saved = 0
    for it in range(config.total_iterations):
        post = it >= config.nburn
        cur = target(beta, logh) + prior(beta, logh)
        if p:
            beta, ok, cur = adaptive_mh_step(beta, lambda b_: target(b_, logh) + prior(b_, logh),
                                             props["beta"], rng, cur)
            acc["beta"] += ok and post
            tries["beta"] += post
        logh, ok, cur = adaptive_mh_step(logh, lambda lh: target(beta, lh) + prior(beta, lh),
                                         props["h"], rng, cur)
        acc["h"] += ok and post
        tries["h"] += post

        if layer is not None:
            bl = base(logh)
            lS, lF, _ = pe_log(bl, X @ beta, t)
            z = normal_scores(lS, lF)
            layer.update(z, rng, post)
            if cens.size:
                lS, lF, _ = pe_log(bl, X[cens] @ beta, t_obs[cens])
                P = layer.R.precision() if layer.R.kind != "identity" else None
                _, t = impute_censored(z, t, t_obs, cens, normal_scores(lS, lF),
                                       lambda zz, idx: pe_inverse(bl, X[idx] @ beta, zz),
                                       rng, P)

        if _save_due(it, config):
            out["beta"][saved] = beta
            out["h"][saved] = np.exp(logh)
            if spatial:
                out["theta1"][saved] = layer.params.theta1
                out["theta2"][saved] = layer.params.theta2
            ll_out[saved] = observed_terms(beta, logh)
            saved += 1
            if config.ndisplay and saved % config.ndisplay == 0:
                log.info("saved %d of %d draws", saved, nsave)

    rates = {b: float(acc[b] / tries[b]) if tries[b] else 0.0 for b in props}
    meta = _meta(ds, config, "copula-coxph" if spatial else "indept-coxph")
    meta.update({"cutpoints": [float(c) for c in cut[1:-1]], "M": M, "h_hat": h_hat})
    if layer is not None:
        rates["theta"] = float(layer.acc / layer.tries) if layer.tries else 0.0
        meta.update(_layer_meta(layer))
    return PosteriorChain(out, ll_out, rates, meta)


def _meta(ds, config, model):
    return {"model": model, "covariate_names": list(ds.covariate_names),
            "x_mean": ds.x_mean.tolist(), "x_sd": ds.x_sd.tolist(), "n": ds.n,
            "seed": config.seed}


def _layer_meta(layer):
    return {"clamped": int(layer.clamped), "fsa": bool(layer.R.use_fsa)}


def _run_ddp(ds, config: ChainConfig, pr: CopulaPriors, spatial: bool) -> PosteriorChain:
    from .gaft import lognormal_aft_fit

    coords = _validate_copula_data(ds, spatial)
    rng = np.random.default_rng(config.seed)
    n, p = ds.n, ds.p
    p1 = p + 1
    t_obs = ds.a.copy()
    delta = ds.a == ds.b
    cens = np.flatnonzero(~delta)
    Xd = np.column_stack([np.ones(n), ds.X])

    beta_hat, s2_hat, Sig_hat, _, _ = lognormal_aft_fit(ds)
    N = int(pr.N)
    if N < 1:
        raise ValidationError("N must be at least 1")
    m0 = beta_hat if pr.m0 is None else np.broadcast_to(pr.m0, (p1,)).astype(float)
    S0 = Sig_hat if pr.S0_ddp is None else np.atleast_2d(pr.S0_ddp)
    Sigma0 = 30.0 * Sig_hat if pr.Sigma0 is None else np.atleast_2d(pr.Sigma0)
    nu_b = s2_hat if pr.nu_b is None else pr.nu_b
    S0_inv = np.linalg.inv(S0)
    k0S0_inv = np.linalg.inv(pr.kappa0 * Sigma0)

    V = np.array([1.0 / (N - k) for k in range(N)])
    state = DdpState(V, np.tile(beta_hat, (N, 1)) + 0.1 * rng.standard_normal((N, p1))
                     * np.sqrt(np.diag(Sig_hat)), np.full(N, s2_hat), 1.0, m0.copy(),
                     Sigma0.copy(), pr.kappa0, Sigma0, pr.nu_a, nu_b)
    y = np.log(t_obs)
    layer = _CopulaLayer(coords, pr, rng) if spatial else None

    def scores(st):
        lS, lF, lf = lddpm_log(st, Xd, np.exp(y))
        return normal_scores(lS, lF), lf

    if cens.size:
        # Start censored times one residual sd above the censoring time.
        y[cens] = y[cens] + np.sqrt(s2_hat)

    def log_copula(st):
        return layer.term(scores(st)[0]) if layer is not None else 0.0

    def mh_correct(candidate, current_term):
        """Accept a draw from the copula-free conditional with the copula ratio."""
        if layer is None:
            return True, current_term
        new_term = log_copula(candidate)
        if np.log(rng.uniform()) < new_term - current_term:
            return True, new_term
        return False, current_term

    nsave = config.nsave
    out = {"beta": np.empty((nsave, N, p1)), "sigma2": np.empty((nsave, N)),
           "w": np.empty((nsave, N)), "alpha": np.empty(nsave), "mu": np.empty((nsave, p1)),
           "Sigma": np.empty((nsave, p1, p1))}
    if spatial:
        out["theta1"] = np.empty(nsave)
        out["theta2"] = np.empty(nsave)
    ll_out = np.empty((nsave, n))
    acc = {"atoms": 0, "sticks": 0}
    tries = {"atoms": 0, "sticks": 0}
    saved = 0
    for it in range(config.total_iterations):
        post = it >= config.nburn
        cur = log_copula(state)

        # Labels given the complete log times.
        loc = Xd @ state.beta.T
        sd = np.sqrt(state.sigma2)
        with np.errstate(divide="ignore"):
            logpk = np.log(state.w) + stats.norm.logpdf(y[:, None], loc, sd)
        gum = logpk - np.log(-np.log(rng.uniform(size=logpk.shape)))
        lab = np.argmax(gum, axis=1)
        counts = np.bincount(lab, minlength=N)

        # Atoms: Gibbs draws from the copula-free conditionals, copula MH ratio.
        Sig_inv = np.linalg.inv(state.Sigma)
        for k in range(N):
            rows = lab == k
            Xk, yk = Xd[rows], y[rows]
            prec = Sig_inv + Xk.T @ Xk / state.sigma2[k]
            cov = np.linalg.inv(prec)
            mean = cov @ (Sig_inv @ state.mu + Xk.T @ yk / state.sigma2[k])
            cand = replace(state, beta=state.beta.copy())
            cand.beta[k] = rng.multivariate_normal(mean, 0.5 * (cov + cov.T))
            ok, cur = mh_correct(cand, cur)
            state = cand if ok else state
            resid = yk - Xk @ state.beta[k]
            cand = replace(state, sigma2=state.sigma2.copy())
            cand.sigma2[k] = 1.0 / rng.gamma(pr.nu_a + 0.5 * rows.sum(),
                                             1.0 / (nu_b + 0.5 * resid @ resid))
            ok2, cur = mh_correct(cand, cur)
            state = cand if ok2 else state
            acc["atoms"] += (ok + ok2) * post
            tries["atoms"] += 2 * post

        # Sticks.
        if N > 1:
            # One stick at a time: the conditionals are independent given the
            # labels, and single moves keep the copula ratio workable.
            tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0]])
            for k in range(N - 1):
                Vn = state.V.copy()
                Vn[k] = np.clip(rng.beta(1.0 + counts[k], state.alpha + tail[k]),
                                1e-12, 1 - 1e-12)
                cand = replace(state, V=Vn)
                ok, cur = mh_correct(cand, cur)
                state = cand if ok else state
                acc["sticks"] += ok * post
                tries["sticks"] += post
            state.alpha = float(rng.gamma(pr.a0 + N - 1,
                                          1.0 / (pr.b0 - np.sum(np.log1p(-state.V[:-1])))))

        # Hyperparameters mu and Sigma (no copula dependence).
        prec = S0_inv + N * Sig_inv
        cov = np.linalg.inv(prec)
        mean = cov @ (S0_inv @ m0 + Sig_inv @ state.beta.sum(axis=0))
        state.mu = rng.multivariate_normal(mean, 0.5 * (cov + cov.T))
        D = state.beta - state.mu
        scale = np.linalg.inv(np.linalg.inv(k0S0_inv) + D.T @ D)
        Sig_inv = stats.wishart.rvs(pr.kappa0 + N, 0.5 * (scale + scale.T), random_state=rng)
        state.Sigma = np.linalg.inv(np.atleast_2d(Sig_inv))

        # Copula parameters and censored log times.
        if layer is not None:
            z, _ = scores(state)
            layer.update(z, rng, post)
            if cens.size:
                lS, lF, _ = lddpm_log(state, Xd[cens], t_obs[cens])
                P = layer.R.precision() if layer.R.kind != "identity" else None
                _, tt = impute_censored(z, np.exp(y), t_obs, cens, normal_scores(lS, lF),
                                        lambda zz, idx: lddpm_inverse(state, Xd[idx], zz),
                                        rng, P)
                y = np.log(tt)
        elif cens.size:
            loc = Xd[cens] @ state.beta.T
            sd = np.sqrt(state.sigma2)
            # Joint draw of (label, log time) for each censored observation.
            with np.errstate(divide="ignore"):
                g = np.log(state.w) + special.log_ndtr(-(np.log(t_obs[cens])[:, None] - loc) / sd)
            kc = np.argmax(g - np.log(-np.log(rng.uniform(size=g.shape))), axis=1)
            lo = (np.log(t_obs[cens]) - loc[np.arange(cens.size), kc]) / sd[kc]
            draws = np.array([_tail_normal(a, rng) for a in lo])
            y[cens] = loc[np.arange(cens.size), kc] + sd[kc] * draws

        if _save_due(it, config):
            out["beta"][saved] = state.beta
            out["sigma2"][saved] = state.sigma2
            out["w"][saved] = state.w
            out["alpha"][saved] = state.alpha
            out["mu"][saved] = state.mu
            out["Sigma"][saved] = state.Sigma
            if spatial:
                out["theta1"][saved] = layer.params.theta1
                out["theta2"][saved] = layer.params.theta2
            lS, _, lf = lddpm_log(state, Xd, t_obs)
            ll_out[saved] = np.where(delta, lf, lS)
            saved += 1
            if config.ndisplay and saved % config.ndisplay == 0:
                log.info("saved %d of %d draws", saved, nsave)

    rates = {b: float(acc[b] / tries[b]) if tries[b] else 0.0 for b in acc}
    meta = _meta(ds, config, "copula-ddp" if spatial else "anova-ddp")
    meta.update({"N": N, "nu_b": float(nu_b)})
    if layer is not None:
        rates["theta"] = float(layer.acc / layer.tries) if layer.tries else 0.0
        meta.update(_layer_meta(layer))
    return PosteriorChain(out, ll_out, rates, meta)


def copula_survival(chain: PosteriorChain, x, t, draws=None) -> np.ndarray:
    """Posterior draws of the marginal survival ``S_x(t)`` (draws x len(t)).

    ``x`` is a covariate row on the scale used for fitting.
    """
    model = chain.meta["model"]
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    idx = range(chain.nsave) if draws is None else draws
    rows = []
    for s in idx:
        if model.endswith("coxph"):
            cut = np.concatenate([[0.0], chain.meta["cutpoints"], [np.inf]])
            bl = PiecewiseExpBaseline(cut, chain["h"][s])
            lS, _, _ = pe_log(bl, float(x @ chain["beta"][s]) if x.size else 0.0, t)
        else:
            st = DdpState(_sticks_from_w(chain["w"][s]), chain["beta"][s], chain["sigma2"][s])
            lS, _, _ = lddpm_log(st, np.tile(x, (t.size, 1)), t)
        rows.append(np.exp(lS))
    return np.array(rows)


def _sticks_from_w(w):
    w = np.asarray(w, dtype=float)
    rest = 1.0 - np.concatenate([[0.0], np.cumsum(w[:-1])])
    with np.errstate(divide="ignore", invalid="ignore"):
        V = np.where(rest > 0, w / rest, 1.0)
    V = np.clip(V, 1e-300, 1 - 1e-16)
    V[-1] = 1.0
    return V
