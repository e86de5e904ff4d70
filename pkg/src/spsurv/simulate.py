"""Synthetic survival data drawn exactly from the supported models."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import special

from .baseline import centering_inverse_survival, tbp_log
from .errors import ValidationError
from .frailty import correlation_matrix, icar_precision
from .semimodels import LINKS, link_log
from .survdata import SpatialStructure, SurvDataset


def lattice_adjacency(nrow: int, ncol: int) -> np.ndarray:
    """Rook adjacency of an ``nrow x ncol`` grid of regions."""
    m = nrow * ncol
    E = np.zeros((m, m))
    for r in range(nrow):
        for c in range(ncol):
            i = r * ncol + c
            if c + 1 < ncol:
                E[i, i + 1] = E[i + 1, i] = 1
            if r + 1 < nrow:
                E[i, i + ncol] = E[i + ncol, i] = 1
    return E


def draw_icar(E, tau2: float, rng) -> np.ndarray:
    """Draw from the ICAR prior restricted to the sum-to-zero subspace."""
    Q = icar_precision(E)
    vals, vecs = np.linalg.eigh(Q)
    keep = vals > 1e-9 * vals.max()
    z = rng.standard_normal(int(keep.sum()))
    v = vecs[:, keep] @ (z / np.sqrt(vals[keep])) * np.sqrt(tau2)
    return v - v.mean()


def baseline_inverse_survival(w, tag: str, theta, s, tol: float = 1e-12) -> np.ndarray:
    """Time ``t`` with ``S0(t) = s``; closed form when ``w`` is ``None``."""
    s = np.asarray(s, dtype=float)
    if w is None:
        return centering_inverse_survival(tag, theta, s)
    lo = np.full(s.shape, -50.0)
    hi = np.full(s.shape, 50.0)
    target = np.log(s)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        logS, _, _ = tbp_log(w, tag, theta, np.exp(mid))
        above = logS > target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.max(hi - lo) < tol:
            break
    return np.exp(0.5 * (lo + hi))


def survreg_inverse(link: str, w, tag: str, theta, eta, u) -> np.ndarray:
    """Event times with ``S_x(t) = u`` under ``link``."""
    u = np.asarray(u, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if link == "AFT":
        return np.exp(-eta) * baseline_inverse_survival(w, tag, theta, u)
    if link == "PH":
        return baseline_inverse_survival(w, tag, theta, np.exp(np.exp(-eta) * np.log(u)))
    if link == "PO":
        c = np.exp(-eta)
        return baseline_inverse_survival(w, tag, theta, u / (c * (1.0 - u) + u))
    raise ValidationError(f"unknown link {link!r}; choose from {LINKS}")


def censor(t, rate: float, rng, kind: str = "random"):
    """Right-censor ``t`` at roughly the target ``rate``.

    ``kind="random"`` uses exponential censoring times whose scale is tuned
    by bisection; ``"administrative"`` uses a fixed cutoff.  Returns
    ``(a, b, achieved_rate)``.
    """
    t = np.asarray(t, dtype=float)
    if not 0 <= rate < 1:
        raise ValidationError("censoring rate must lie in [0, 1)")
    if rate == 0:
        return t.copy(), t.copy(), 0.0
    if kind == "administrative":
        cut = np.quantile(t, 1.0 - rate)
        c = np.full(t.shape, cut)
    elif kind == "random":
        e = rng.exponential(size=t.shape)
        lo, hi = -30.0, 30.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            frac = np.mean(e / np.exp(mid) < t)
            lo, hi = (mid, hi) if frac < rate else (lo, mid)
        c = e / np.exp(hi)
    else:
        raise ValidationError(f"unknown censoring kind {kind!r}")
    cens = c < t
    a = np.where(cens, c, t)
    b = np.where(cens, np.inf, t)
    achieved = float(cens.mean())
    if abs(achieved - rate) > max(0.02, 2.0 / np.sqrt(t.size)):
        warnings.warn(f"target censoring rate {rate} not attained; achieved {achieved:.3f}",
                      RuntimeWarning, stacklevel=2)
    return a, b, achieved


def _assign_units(n, m, rng):
    if m > n:
        raise ValidationError("more units than observations")
    unit = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return np.sort(unit)


def simulate_frailty(kind: str, m: int, tau2: float, rng, phi: float | None = None,
                     nu: float = 1.0):
    """Spatial structure and frailty vector for ``kind`` in car/iid/grf."""
    if kind == "car":
        nrow = int(np.floor(np.sqrt(m)))
        while m % nrow:
            nrow -= 1
        E = lattice_adjacency(nrow, m // nrow)
        return SpatialStructure.areal(E), draw_icar(E, tau2, rng)
    if kind == "iid":
        return SpatialStructure.clustered(m), rng.normal(0.0, np.sqrt(tau2), size=m)
    if kind == "grf":
        coords = rng.uniform(size=(m, 2))
        R = correlation_matrix(coords, phi, nu)
        v = np.linalg.cholesky(R + 1e-12 * np.eye(m)) @ rng.standard_normal(m) * np.sqrt(tau2)
        return SpatialStructure.geo(coords), v
    raise ValidationError(f"unknown frailty prior {kind!r}")


def simulate_survreg(n: int, link: str, family: str, theta, beta, rng, *, w=None,
                     frailty: str | None = None, m: int = 1, tau2: float = 1.0,
                     phi: float | None = None, nu: float = 1.0, censor_rate: float = 0.0,
                     censoring: str = "random", X=None):
    """Draw a dataset from an AFT/PH/PO model by inverting ``S_x``.

    Covariates default to independent standard normals.  Returns the
    dataset and a dictionary of true values.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    p = beta.size
    X = rng.standard_normal((n, p)) if X is None else np.asarray(X, dtype=float).reshape(n, p)
    if frailty is None:
        structure, v, unit = SpatialStructure.none(), None, np.zeros(n, dtype=int)
    else:
        structure, v = simulate_frailty(frailty, m, tau2, rng, phi, nu)
        unit = _assign_units(n, structure.m, rng)
    eta = X @ beta + (v[unit] if v is not None else 0.0)
    t = survreg_inverse(link, w, family, theta, eta, rng.uniform(size=n))
    a, b, achieved = censor(t, censor_rate, rng, censoring)
    ds = SurvDataset(u=np.zeros(n), a=a, b=b, X=X, unit=unit,
                     covariate_names=[f"x{j + 1}" for j in range(p)], structure=structure)
    truth = {"model": f"survreg-{link.lower()}", "family": family,
             "theta": list(map(float, theta)), "beta": beta.tolist(),
             "frailty": frailty or "none", "tau2": tau2 if frailty else None,
             "phi": phi, "v": None if v is None else v.tolist(),
             "w": None if w is None else np.asarray(w).tolist(),
             "censor_rate": achieved, "event_times": t.tolist()}
    return ds, truth


def simulate_copula(n: int, beta, theta1: float, theta2: float, rng, *,
                    marginal: str = "weibull-ph", shape: float = 1.5, scale: float = 1.0,
                    sigma: float = 1.0, censor_rate: float = 0.0, censoring: str = "random"):
    """Georeferenced data with a Gaussian copula on ``n`` random locations.

    ``marginal="weibull-ph"`` uses ``Lambda0(t) = (t / scale)^shape``;
    ``"lognormal-aft"`` uses ``log t = x'beta + sigma * e``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = rng.standard_normal((n, beta.size))
    coords = rng.uniform(size=(n, 2))
    R = theta1 * correlation_matrix(coords, theta2, 1.0) + (1.0 - theta1) * np.eye(n)
    zs = np.linalg.cholesky(R) @ rng.standard_normal(n)
    U = special.ndtr(zs)
    eta = X @ beta
    if marginal == "weibull-ph":
        t = scale * (-np.log1p(-U) * np.exp(-eta)) ** (1.0 / shape)
    elif marginal == "lognormal-aft":
        t = np.exp(eta + sigma * zs)
    else:
        raise ValidationError(f"unknown copula marginal {marginal!r}")
    a, b, achieved = censor(t, censor_rate, rng, censoring)
    ds = SurvDataset(u=np.zeros(n), a=a, b=b, X=X, unit=np.arange(n),
                     covariate_names=[f"x{j + 1}" for j in range(beta.size)],
                     structure=SpatialStructure.geo(coords))
    truth = {"model": "copula", "marginal": marginal, "beta": beta.tolist(),
             "theta1": theta1, "theta2": theta2, "censor_rate": achieved,
             "normal_scores": zs.tolist(), "event_times": t.tolist()}
    return ds, truth


def pit_values(link: str, w, family: str, theta, eta, t) -> np.ndarray:
    """``S_x(t)``, Uniform(0, 1) when ``t`` follows the model."""
    logS, _, _ = link_log(link, w, family, theta, eta, t)
    return np.exp(logS)
