"""Parametric centering families and the transformed Bernstein polynomial baseline.

All three families share the standardized argument
``u = exp(theta2) * (theta1 + log t)``:

* log-logistic: ``S(t) = 1 / (1 + exp(u))``
* log-normal:   ``S(t) = 1 - Phi(u)``
* Weibull:      ``S(t) = exp(-exp(u))``

The TBP baseline mixes beta cdfs of ``S_theta(t)``,
``S0(t) = sum_j w_j I(S_theta(t) | j, L - j + 1)``.  It is evaluated
through the equivalent Bernstein basis
``I(s | j, L - j + 1) = P(Binomial(L, s) >= j)`` entirely in log space,
which keeps both tails accurate without clamping ``s`` away from 0 and 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special, stats

from .errors import NumericalError, ValidationError

FAMILIES = ("loglogistic", "lognormal", "weibull")


@dataclass(frozen=True)
class CenteringFamily:
    tag: str
    theta: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.tag not in FAMILIES:
            raise ValidationError(f"unknown centering family {self.tag!r}; choose from {FAMILIES}")
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))


def _shape(theta2):
    with np.errstate(over="ignore"):
        k = np.exp(theta2)
    if not np.isfinite(k) or k == 0:
        raise NumericalError(f"non-finite centering parameter exp(theta2) for theta2={theta2}")
    return k


def centering_log(tag: str, theta, t):
    """Return ``(log S, log F, log f)`` of a centering family at ``t``.

    ``t`` may contain 0 and ``inf``; ``log f`` is only meaningful for
    finite positive ``t``.
    """
    t = np.asarray(t, dtype=float)
    th1, th2 = float(theta[0]), float(theta[1])
    k = _shape(th2)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logt = np.log(t)
        u = k * (th1 + logt)
        if tag == "loglogistic":
            logS = -np.logaddexp(0.0, u)
            logF = -np.logaddexp(0.0, -u)
            logf = np.log(k) - logt + logS + logF
        elif tag == "lognormal":
            logS = special.log_ndtr(-u)
            logF = special.log_ndtr(u)
            logf = stats.norm.logpdf(u) + np.log(k) - logt
        elif tag == "weibull":
            eu = np.exp(u)
            logS = -eu
            logF = np.log(-np.expm1(-eu))
            logf = u + np.log(k) - logt - eu
        else:
            raise ValidationError(f"unknown centering family {tag!r}")
    return logS, logF, logf


def centering_eval(family: CenteringFamily, t):
    """Survival ``S_theta(t)`` and density ``f_theta(t)`` for ``t > 0``."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValidationError("centering family evaluated at t <= 0")
    logS, _, logf = centering_log(family.tag, family.theta, t)
    return np.exp(logS), np.exp(logf)


def centering_inverse_survival(tag: str, theta, s):
    """Time ``t`` with ``S_theta(t) = s`` for ``s`` in (0, 1)."""
    s = np.asarray(s, dtype=float)
    k = _shape(theta[1])
    if tag == "loglogistic":
        u = np.log1p(-s) - np.log(s)
    elif tag == "lognormal":
        u = -special.ndtri(s)
    elif tag == "weibull":
        u = np.log(-np.log(s))
    else:
        raise ValidationError(f"unknown centering family {tag!r}")
    return np.exp(u / k - theta[0])


def weights_from_z(z, L: int | None = None) -> np.ndarray:
    """Softmax with the last log-ratio pinned at zero."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if L is not None and z.shape[-1] != L - 1:
        raise ValidationError(f"z has length {z.shape[-1]}, expected {L - 1}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("z must be finite")
    full = np.concatenate([z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    return np.exp(full - special.logsumexp(full, axis=-1, keepdims=True))


def z_from_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(~(w > 0)):
        raise ValidationError("log-ratio transform needs strictly positive weights")
    lw = np.log(w)
    return lw[..., :-1] - lw[..., -1:]


@dataclass(frozen=True)
class TbpState:
    """Baseline survival parameters: weight simplex, concentration, centering."""

    w: np.ndarray
    alpha: float
    family: CenteringFamily

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValidationError("TBP weights must form a simplex")
        if not self.alpha > 0:
            raise ValidationError("TBP concentration alpha must be positive")
        object.__setattr__(self, "w", w)

    @property
    def L(self) -> int:
        return self.w.shape[0]

    @property
    def z(self) -> np.ndarray:
        return z_from_weights(self.w)

    @classmethod
    def uniform(cls, L: int, family: CenteringFamily, alpha=np.inf) -> "TbpState":
        return cls(np.full(L, 1.0 / L), alpha, family)

    @classmethod
    def from_z(cls, z, alpha, family) -> "TbpState":
        return cls(weights_from_z(z), alpha, family)


@lru_cache(maxsize=64)
def _log_binom_coef(N: int) -> np.ndarray:
    k = np.arange(N + 1)
    out = special.gammaln(N + 1) - special.gammaln(k + 1) - special.gammaln(N - k + 1)
    out.setflags(write=False)
    return out


def _lse(a):
    """Log-sum-exp over the last axis (plain numpy; rows of -inf give -inf)."""
    mx = a.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - mx), axis=-1)) + mx[..., 0]


def _binom_logpmf(N: int, logS, logF):
    """``log P(Binomial(N, s) = k)`` for k = 0..N; rows follow ``logS``."""
    k = np.arange(N + 1)
    logc = _log_binom_coef(N)
    logS = np.asarray(logS)[..., None]
    logF = np.asarray(logF)[..., None]
    with np.errstate(invalid="ignore"):
        a = np.where(k == 0, 0.0, k * logS)
        b = np.where(k == N, 0.0, (N - k) * logF)
    return logc + a + b


def tbp_log(w, tag: str, theta, t):
    """``(log S0, log F0, log f0)`` of the TBP baseline at ``t``.

    ``w=None`` evaluates the centering family itself (the ``alpha = inf``
    limit).
    """
    logS, logF, logf = centering_log(tag, theta, t)
    if w is None:
        return logS, logF, logf
    w = np.asarray(w, dtype=float)
    L = w.shape[0]
    if L == 1:
        return logS, logF, logf
    with np.errstate(divide="ignore"):
        cum = np.concatenate([[0.0], np.cumsum(w)])
        tail = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
        logW = np.log(np.minimum(cum, 1.0))
        logT = np.log(tail)
        logw = np.log(w)
    lp = _binom_logpmf(L, logS, logF)
    with np.errstate(divide="ignore", invalid="ignore"):
        logS0 = _lse(lp + logW)
        logF0 = _lse(lp + logT)
        lq = _binom_logpmf(L - 1, logS, logF)
        logf0 = logf + np.log(L) + _lse(lq + logw)
    return logS0, logF0, logf0


def tbp_eval(state: TbpState, t):
    """Baseline survival ``S0(t)`` and density ``f0(t)`` for ``t > 0``."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValidationError("TBP baseline evaluated at t <= 0")
    logS0, _, logf0 = tbp_log(state.w, state.family.tag, state.family.theta, t)
    return np.exp(logS0), np.exp(logf0)


def tbp_log_prior(w, alpha: float, z_coords: bool = False) -> float:
    """Log Dirichlet(alpha, ..., alpha) density of ``w``.

    With ``z_coords=True`` the log-Jacobian ``sum(log w)`` of the
    ``z -> w`` map is added, giving the density of the log-ratios.
    """
    w = np.asarray(w, dtype=float)
    if not alpha > 0:
        raise ValidationError("Dirichlet concentration must be positive")
    L = w.shape[-1]
    if L == 1:
        return 0.0
    lw = np.log(w)
    power = alpha if z_coords else alpha - 1.0
    return float(special.gammaln(L * alpha) - L * special.gammaln(alpha) + power * lw.sum(-1))
