"""Cox-Snell residuals, the Turnbull NPMLE and Bayesian model-choice criteria."""
from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import ValidationError


@dataclass
class ResidualSample:
    """Cox-Snell residual intervals ``(r(a), r(b))`` for one posterior draw."""

    ra: np.ndarray
    rb: np.ndarray
    draw: int = -1

    def __post_init__(self):
        self.ra = np.asarray(self.ra, dtype=float)
        self.rb = np.asarray(self.rb, dtype=float)
        if np.any(self.ra < -1e-12) or np.any(self.rb < self.ra - 1e-9 * (1 + np.abs(self.ra))):
            raise ValidationError("residual intervals must satisfy 0 <= r(a) <= r(b)")
        self.ra = np.maximum(self.ra, 0.0)
        self.rb = np.maximum(self.rb, self.ra)


def residual_intervals(log_survival, a, b) -> ResidualSample:
    """Map interval endpoints through ``r(t) = -log S(t)``.

    ``log_survival(t)`` is evaluated on the concatenated endpoints.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    logS = log_survival(np.concatenate([a, b]))
    n = a.size
    ra = -logS[:n]
    rb = np.where(np.isinf(b), np.inf, -logS[n:])
    rb = np.where(a == b, ra, rb)
    return ResidualSample(ra, rb)


def cox_snell(chain, ds, ncurves: int = 10, rng=None) -> list[ResidualSample]:
    """Residual intervals for ``ncurves`` randomly chosen saved draws."""
    from .mcmc import spec_from_draw
    from .semimodels import link_log, linear_predictor

    rng = np.random.default_rng(0) if rng is None else rng
    if chain.nsave < 1:
        raise ValidationError("chain has no saved draws")
    draws = np.sort(rng.choice(chain.nsave, size=min(ncurves, chain.nsave), replace=False))
    out = []
    for s in draws:
        spec = spec_from_draw(chain, int(s))
        v = spec.frailty.v if spec.frailty is not None else None
        eta = linear_predictor(ds.X, spec.beta, spec.gamma, v, ds.unit)
        fam = spec.baseline.family
        eta2 = np.concatenate([eta, eta])

        def logS(t):
            return link_log(spec.link, spec.w, fam.tag, fam.theta, eta2, t)[0]
        r = residual_intervals(logS, ds.a, ds.b)
        r.draw = int(s)
        out.append(r)
    return out


@dataclass
class TurnbullResult:
    """Self-consistent NPMLE over the innermost intervals ``[q_j, p_j]``."""

    q: np.ndarray
    p: np.ndarray
    mass: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool

    def survival_at(self, t) -> np.ndarray:
        """``S(t)`` with every innermost interval's mass placed at its right end."""
        t = np.asarray(t, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.mass)])
        k = np.searchsorted(self.p, t, side="right")
        return np.clip(1.0 - cum[k], 0.0, 1.0)

    def cumulative_hazard(self, t) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return -np.log(self.survival_at(t))


def turnbull_npmle(left, right, tol: float = 1e-8, max_iter: int = 100_000) -> TurnbullResult:
    """Turnbull's estimator for arbitrarily right/interval-censored data.

    Observation ``i`` is the point ``{left_i}`` when ``left_i == right_i``
    and the set ``(left_i, right_i]`` otherwise.  EM stops when the largest
    change of any interval mass falls below ``tol``.
    """
    L = np.asarray(left, dtype=float)
    R = np.asarray(right, dtype=float)
    if L.size < 1:
        raise ValidationError("Turnbull estimator needs at least one interval")
    if np.any(R < L):
        raise ValidationError("intervals must satisfy left <= right")
    exact = L == R
    # Tie order at a common value: closed left ends (exact points) first,
    # then right ends, then open left ends.
    vals = np.concatenate([L, R])
    kind = np.concatenate([np.where(exact, 0, 2), np.ones(R.size, dtype=int)])
    order = np.lexsort((kind, vals))
    vals, kind = vals[order], kind[order]
    is_left = kind != 1
    starts = np.flatnonzero(is_left[:-1] & ~is_left[1:])
    q, p = vals[starts], vals[starts + 1]
    q_open = kind[starts] == 2

    cens = ~exact
    alpha = np.zeros((L.size, q.size), dtype=bool)
    if np.any(exact):
        alpha[exact] = (q[None, :] == L[exact, None]) & (p[None, :] == L[exact, None]) & ~q_open
    if np.any(cens):
        Lc, Rc = L[cens, None], R[cens, None]
        inside_left = (q[None, :] > Lc) | ((q[None, :] == Lc) & q_open[None, :])
        alpha[cens] = inside_left & (p[None, :] <= Rc)
    A = alpha.astype(float)
    degenerate = bool(np.all(cens & (L == 0) & np.isinf(R)))
    if np.any(A.sum(axis=1) == 0):
        raise ValidationError("an observation covers no innermost interval")

    s = np.full(q.size, 1.0 / q.size)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        denom = A @ s
        s_new = s * (A.T @ (1.0 / denom)) / L.size
        change = np.max(np.abs(s_new - s))
        s = s_new
        if change < tol:
            converged = True
            break
    return TurnbullResult(q, p, s, it, converged, degenerate)


def hazard_slope(result: TurnbullResult, lo: float = 0.1, hi: float = 0.9) -> float:
    """Least-squares slope of the integrated hazard against ``t``.

    Uses the finite right ends ``p_j`` whose estimated cdf lies in
    ``[lo, hi]``.
    """
    t = result.p[np.isfinite(result.p)]
    F = 1.0 - result.survival_at(t)
    keep = (F >= lo) & (F <= hi)
    if keep.sum() < 2:
        raise ValidationError("too few support points in the central quantile range")
    t, H = t[keep], result.cumulative_hazard(t[keep])
    return float(np.polyfit(t, H, 1)[0])


def coxsnell_slopes(samples, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Turnbull integrated-hazard slope for every residual sample."""
    return np.array([hazard_slope(turnbull_npmle(r.ra, r.rb), lo, hi) for r in samples])


def lpml(loglik):
    """Log pseudo-marginal likelihood and per-observation CPO.

    Returns ``(LPML, cpo, unstable)``; ``unstable`` flags observations whose
    log-likelihood spread across draws exceeds 30 nats.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValidationError("loglik must be an (nsave >= 2) x n matrix")
    S = ll.shape[0]
    log_cpo = -(special.logsumexp(-ll, axis=0) - np.log(S))
    unstable = (ll.max(axis=0) - ll.min(axis=0)) > 30.0
    return float(log_cpo.sum()), np.exp(log_cpo), unstable


def waic(loglik):
    """``(WAIC, pWAIC)`` with the sample (``n - 1``) variance."""
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValidationError("loglik must be an (nsave >= 2) x n matrix")
    lppd = special.logsumexp(ll, axis=0) - np.log(ll.shape[0])
    # Deviations from the first draw make a constant chain give exactly zero.
    p_waic = (ll - ll[0]).var(axis=0, ddof=1)
    return float(-2.0 * (lppd.sum() - p_waic.sum())), float(p_waic.sum())


def dic(loglik, plugin_loglik: float):
    """``(DIC, pD)`` from the saved log-likelihoods and a plug-in value."""
    ll = np.asarray(loglik, dtype=float)
    rows = ll.sum(axis=1)
    dbar = -2.0 * (rows[0] + float(np.mean(rows - rows[0])))
    pd = dbar + 2.0 * float(plugin_loglik)
    return dbar + pd, pd


def tbp_null_density(alpha: float, L: int) -> float:
    """Prior density of ``z = 0`` under Dirichlet(alpha) weights."""
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    return float(np.exp(special.gammaln(alpha * L) - L * (alpha * np.log(L) + special.gammaln(alpha))))


def _ridge(cov, what):
    cov = np.atleast_2d(cov)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        lam = 1e-8 * np.trace(cov) / cov.shape[0]
        warnings.warn(f"singular posterior covariance for {what}; adding ridge {lam:.3g}",
                      RuntimeWarning, stacklevel=3)
        return cov + max(lam, 1e-300) * np.eye(cov.shape[0])


def savage_dickey_bf(z_draws, alpha_draws) -> float:
    """Bayes factor of the TBP model against its parametric centering model.

    ``p(z = 0 | alpha_hat) / N(0; m_hat, S_hat)`` with posterior moments of
    ``z``.
    """
    z = np.asarray(z_draws, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] < 2:
        raise ValidationError("need at least two draws of z")
    alpha_hat = float(np.mean(alpha_draws))
    L = z.shape[1] + 1
    m = z.mean(axis=0)
    S = _ridge(np.cov(z.T), "z")
    den = stats.multivariate_normal(m, S).logpdf(np.zeros(z.shape[1]))
    num = np.log(tbp_null_density(alpha_hat, L))
    with np.errstate(over="ignore"):
        return float(np.exp(num - den))


def mcse(x, nbatch: int | None = None) -> np.ndarray:
    """Batch-means Monte Carlo standard error of the mean (per column)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x = x[:, None] if squeeze else x
    n = x.shape[0]
    nbatch = int(np.sqrt(n)) if nbatch is None else nbatch
    size = n // nbatch
    if nbatch < 2 or size < 1:
        raise ValidationError("too few draws for batch means")
    means = x[: nbatch * size].reshape(nbatch, size, -1).mean(axis=1)
    out = np.sqrt(size * means.var(axis=0, ddof=1) / n)
    return out[0] if squeeze else out


def posterior_summary(draws) -> dict:
    """Mean, median, sd and 95% equal-tail interval per column."""
    d = np.asarray(draws, dtype=float)
    d = d[:, None] if d.ndim == 1 else d
    return {"mean": d.mean(0), "median": np.median(d, 0), "sd": d.std(0, ddof=1) if d.shape[0] > 1
            else np.zeros(d.shape[1]), "lower": np.quantile(d, 0.025, axis=0),
            "upper": np.quantile(d, 0.975, axis=0)}


def model_frequencies(gamma_draws, names) -> list[tuple[str, float]]:
    """Visited models (sets of included covariates) and their frequencies."""
    g = np.asarray(gamma_draws, dtype=int)
    counts = Counter(",".join(n for n, on in zip(names, row) if on) or "(none)" for row in g)
    total = g.shape[0]
    return sorted(((k, c / total) for k, c in counts.items()), key=lambda kv: (-kv[1], kv[0]))
