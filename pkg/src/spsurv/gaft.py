"""Generalized AFT model with a linear dependent tailfree process (LDTFP) error.

The log survival time is ``y = x~'beta~ + v + eps`` where the error
distribution ``G_z`` is a dyadic tailfree process centered at ``N(0, sigma^2)``
whose branch probabilities are logistic regressions on baseline covariates
``z~ = (1, z)``.  Tree coefficients are stored breadth-first: node ``(j, k)``
(depth ``j``, position ``k = 1..2^j``) lives in row ``2^j - 1 + k - 1``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import NumericalError, ValidationError
from .mcmc import (AdaptiveProposal, ChainConfig, FrailtyBlock, PosteriorChain,
                   adaptive_mh_step, parametric_mle)
from .semimodels import DEGENERATE_TOL

log = logging.getLogger("spsurv")

LOG2 = np.log(2.0)


def node_index(j: int, k: int) -> int:
    """Row of node ``(j, k)`` in the coefficient array (``k`` is 1-based)."""
    return 2 ** j - 1 + (k - 1)


def baseline_design(Z, center=None, n: int | None = None):
    """``[1, Z - center]`` and the centering used (column means by default).

    ``n`` gives the number of rows when ``Z`` is ``None``.
    """
    n = (len(Z) if Z is not None else 0) if n is None else n
    if Z is None or np.asarray(Z).size == 0:
        return np.ones((n, 1)), np.zeros(0)
    Z = np.asarray(Z, dtype=float).reshape(n, -1)
    center = Z.mean(axis=0) if center is None else np.asarray(center, dtype=float)
    return np.column_stack([np.ones(n), Z - center]), center


@dataclass
class LdtfpState:
    """Parameters of the GAFT model.

    ``gamma`` has shape ``(2^L - 1, q + 1)`` with the root row pinned at
    zero.  ``beta`` includes the intercept first.  ``ZtZ`` and ``n`` define
    the prior scale of the tree coefficients; ``z_center`` maps new
    covariates onto the centered design.
    """

    L: int
    sigma2: float
    alpha: float
    gamma: np.ndarray
    beta: np.ndarray
    ZtZ: np.ndarray | None = None
    n: int | None = None
    z_center: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.L < 1:
            raise ValidationError("tree depth L must be at least 1")
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.ndim != 2 or self.gamma.shape[0] != 2 ** self.L - 1:
            raise ValidationError(f"gamma must have {2 ** self.L - 1} rows")
        if np.any(self.gamma[0] != 0):
            raise ValidationError("the root coefficient vector must be zero")
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))

    @property
    def q(self) -> int:
        return self.gamma.shape[1] - 1

    @classmethod
    def zero(cls, L, q, sigma2=1.0, alpha=1.0, beta=None, p=0, **kw) -> "LdtfpState":
        beta = np.zeros(p + 1) if beta is None else beta
        return cls(L, sigma2, alpha, np.zeros((2 ** L - 1, q + 1)), beta, **kw)


def _state_design(state: LdtfpState, z, rows: int) -> np.ndarray:
    """Design rows ``(1, z - center)`` for raw covariates ``z``, repeated ``rows`` times."""
    if not state.q:
        return np.ones((rows, 1))
    z = np.broadcast_to(np.atleast_2d(np.asarray(z, dtype=float)), (rows, state.q))
    center = state.z_center if state.z_center.size else np.zeros(state.q)
    return np.column_stack([np.ones(rows), z - center])


def ldtfp_partition_index(sigma: float, e, L: int):
    """``k_sigma(e) = ceil(2^L Phi_sigma(e))`` clamped to ``[1, 2^L]``."""
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    u = (2 ** L) * special.ndtr(np.asarray(e, dtype=float) / sigma)
    return np.clip(np.ceil(u), 1, 2 ** L).astype(int)


def leaf_log_probs(gamma, Zt, L: int) -> np.ndarray:
    """``log p_z(k)`` for every row of ``Zt`` and every leaf ``k = 1..2^L``."""
    Zt = np.atleast_2d(Zt)
    logp = np.zeros((Zt.shape[0], 1))
    for j in range(L):
        lin = Zt @ gamma[2 ** j - 1: 2 ** (j + 1) - 1].T
        left = logp + special.log_expit(lin)
        right = logp + special.log_expit(-lin)
        logp = np.stack([left, right], axis=-1).reshape(Zt.shape[0], -1)
    return logp


def ldtfp_prob(k, z, state: LdtfpState) -> np.ndarray:
    """``p_z(k)`` for 1-based leaf ``k`` at raw baseline covariates ``z``."""
    lp = leaf_log_probs(state.gamma, _state_design(state, z, 1), state.L)
    k = np.asarray(k)
    if np.any((k < 1) | (k > 2 ** state.L)):
        raise ValidationError("leaf index outside 1..2^L")
    return np.exp(lp[:, k - 1]).squeeze()


def _ldtfp_logs(logp, sigma, L, e):
    """``(log f, log G, log(1 - G))`` of the error at ``e`` (rows of ``logp``)."""
    e = np.asarray(e, dtype=float)
    N = 2 ** L
    k = ldtfp_partition_index(sigma, e, L)
    rows = np.arange(logp.shape[0])
    lpk = logp[rows, k - 1]
    p = np.exp(logp)
    cum = np.concatenate([np.zeros((p.shape[0], 1)), np.cumsum(p, axis=1)], axis=1)
    below = cum[rows, k - 1]
    above = np.clip(1.0 - cum[rows, k], 0.0, 1.0)
    # Tail-accurate fractions of leaf k lying below and above e.
    zs = e / sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        low_frac = np.where(k == 1, N * special.ndtr(zs), N * special.ndtr(zs) - (k - 1))
        up_frac = np.where(k == N, N * special.ndtr(-zs), k - N * special.ndtr(zs))
        low_frac = np.clip(low_frac, 0.0, 1.0)
        up_frac = np.clip(up_frac, 0.0, 1.0)
        logG = np.where(k == 1, lpk + np.log(N) + special.log_ndtr(zs),
                        np.logaddexp(np.log(below), lpk + np.log(low_frac)))
        logS = np.where(k == N, lpk + np.log(N) + special.log_ndtr(-zs),
                        np.logaddexp(np.log(above), lpk + np.log(up_frac)))
        logf = L * LOG2 + stats.norm.logpdf(e, scale=sigma) + lpk
    return logf, logG, logS


def ldtfp_eval(state: LdtfpState, z, e):
    """Density ``f_z(e)`` and cdf ``G_z(e)`` of the LDTFP error distribution."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    logp = leaf_log_probs(state.gamma, _state_design(state, z, e.size), state.L)
    logf, logG, _ = _ldtfp_logs(logp, state.sigma, state.L, e)
    return np.exp(logf), np.exp(logG)


def _prior_scales(L, alpha, n):
    return np.array([2.0 * n / (alpha * (j + 1) ** 2) for j in range(L)])


def _check_ztz(ZtZ):
    ZtZ = np.atleast_2d(np.asarray(ZtZ, dtype=float))
    if np.linalg.matrix_rank(ZtZ) < ZtZ.shape[0]:
        raise ValidationError("Z'Z is singular; baseline covariates are collinear")
    return ZtZ


def ldtfp_log_prior(state: LdtfpState) -> float:
    """Sum of Gaussian log densities of the free tree coefficients."""
    if state.ZtZ is None or state.n is None:
        raise ValidationError("state needs ZtZ and n for the tree prior")
    ZtZ = _check_ztz(state.ZtZ)
    d = ZtZ.shape[0]
    _, logdet_ztz = np.linalg.slogdet(ZtZ)
    c = _prior_scales(state.L, state.alpha, state.n)
    total = 0.0
    for j in range(1, state.L):
        G = state.gamma[2 ** j - 1: 2 ** (j + 1) - 1]
        quad = np.einsum("ki,ij,kj->", G, ZtZ, G) / c[j]
        nodes = G.shape[0]
        total += nodes * (-0.5 * d * np.log(2 * np.pi) - 0.5 * d * np.log(c[j])
                          + 0.5 * logdet_ztz) - 0.5 * quad
    return float(total)


class _GaftData:
    def __init__(self, ds, z_center=None):
        self.Xt = np.column_stack([np.ones(ds.n), ds.X])
        self.Zt, self.z_center = baseline_design(ds.Z, z_center, ds.n)
        self.u, self.a, self.b = ds.u, ds.a, ds.b
        self.n = ds.n
        with np.errstate(divide="ignore"):
            self.log_a = np.log(ds.a)
            self.log_b = np.log(ds.b)
            self.log_u = np.log(ds.u)


def _gaft_terms(data: _GaftData, logp, sigma, L, loc, rows=None):
    if rows is None:
        rows = np.arange(data.n)
    a, b, u = data.a[rows], data.b[rows], data.u[rows]
    la, lb, lu = data.log_a[rows], data.log_b[rows], data.log_u[rows]
    lp = logp[rows]
    mu = loc[rows]
    exact = a == b
    ea = la - mu
    logf_a, logG_a, logS_a = _ldtfp_logs(lp, sigma, L, np.where(np.isfinite(ea), ea, 0.0))
    logG_a = np.where(a == 0, -np.inf, logG_a)
    logS_a = np.where(a == 0, 0.0, logS_a)
    out = np.where(exact, logf_a - la, logS_a)
    fin = ~exact & np.isfinite(b)
    if np.any(fin):
        eb = lb[fin] - mu[fin]
        _, logG_b, logS_b = _ldtfp_logs(lp[fin], sigma, L, eb)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            via_G = logG_b + np.log1p(-np.exp(logG_a[fin] - logG_b))
            via_S = logS_a[fin] + np.log1p(-np.exp(logS_b - logS_a[fin]))
        diff = np.where(logG_b < np.log(0.5), via_G, via_S)
        bad = ~np.isfinite(diff) | (diff < np.log(DEGENERATE_TOL) + np.maximum(logS_a[fin], logG_b))
        bad &= a[fin] > 0
        if np.any(bad):
            sub = np.flatnonzero(fin)[bad]
            tm = 0.5 * (a[sub] + b[sub])
            lf, _, _ = _ldtfp_logs(lp[sub], sigma, L, np.log(tm) - mu[sub])
            diff = diff.copy()
            diff[bad] = np.maximum(np.nan_to_num(diff[bad], nan=-np.inf),
                                   lf - np.log(tm) + np.log(b[sub] - a[sub]))
        out[fin] = diff
    trunc = u > 0
    if np.any(trunc):
        _, _, logS_u = _ldtfp_logs(lp[trunc], sigma, L, lu[trunc] - mu[trunc])
        out[trunc] -= logS_u
    return out


def gaft_log_likelihood(ds, state: LdtfpState, frailty=None):
    """Total and per-observation log-likelihood of the GAFT model.

    ``frailty`` is a length-``m`` vector (or an object with ``.v``).
    """
    if state.beta.size != ds.p + 1:
        raise ValidationError(f"beta must have {ds.p + 1} entries (intercept first)")
    if ds.Z is None and state.q:
        raise ValidationError("state has baseline covariates but the dataset has none")
    data = _GaftData(ds, state.z_center if state.z_center.size else None)
    loc = data.Xt @ state.beta
    if frailty is not None:
        v = getattr(frailty, "v", frailty)
        loc = loc + np.asarray(v)[ds.unit]
    logp = leaf_log_probs(state.gamma, data.Zt, state.L)
    per_obs = _gaft_terms(data, logp, state.sigma, state.L, loc)
    return float(per_obs.sum()), per_obs


def lognormal_aft_fit(ds):
    """ML estimates of ``(beta~, sigma2)`` and the asymptotic covariance.

    Returns ``(beta, sigma2, cov_beta, var_sigma2, cov_log_sigma)``.
    """
    theta, beta, V, S, _ = parametric_mle(ds, "AFT", "lognormal")
    # S(t) = Phi(-exp(th2) (th1 + log t + x'b))  =>  log t = -th1 - x'b + exp(-th2) e
    beta_t = np.concatenate([[-theta[0]], -beta])
    sigma2 = float(np.exp(-2.0 * theta[1]))
    p = beta.size
    J = np.zeros((p + 2, p + 2))
    J[0, 0] = -1.0
    J[1:p + 1, 2:] = -np.eye(p)
    J[p + 1, 1] = -1.0
    full = np.zeros((p + 2, p + 2))
    full[:2, :2] = V
    full[2:, 2:] = S
    cov = J @ full @ J.T
    var_log_sigma = cov[p + 1, p + 1]
    var_sigma2 = (2.0 * sigma2) ** 2 * var_log_sigma
    return beta_t, sigma2, cov[:p + 1, :p + 1], var_sigma2, var_log_sigma


@dataclass
class GaftPriors:
    """GAFT hyperparameters; ``None`` entries use the lognormal AFT fit."""

    L: int = 4
    m0: np.ndarray | None = None
    S0: np.ndarray | None = None
    a0: float = 1.0
    b0: float = 1.0
    a_sigma: float | None = None
    b_sigma: float | None = None
    a_tau: float = 1.0
    b_tau: float = 1.0
    a_phi: float = 2.0
    b_phi: float | None = None

    @classmethod
    def reference_defaults(cls) -> "GaftPriors":
        """Depth 4 with a Gamma(5, 1) prior on ``alpha``."""
        return cls(L=4, a0=5.0, b0=1.0)


def run_gaft(ds, config: ChainConfig, priors: GaftPriors | None = None, *,
             frailty: str | None = None, alpha: float = 1.0, nu: float = 1.0) -> PosteriorChain:
    """Adaptive-MH sampler for the GAFT model.

    Blocks: ``beta~``; ``log sigma``; each tree coefficient vector
    ``gamma_{j,k}`` (depth >= 1); ``log alpha`` (unless ``a0 < 0``); frailties.
    """
    pr = priors or GaftPriors()
    rng = np.random.default_rng(config.seed)
    L = pr.L
    data = _GaftData(ds)
    n, p = ds.n, ds.p
    Zt = data.Zt
    d = Zt.shape[1]
    ZtZ = _check_ztz(Zt.T @ Zt)

    beta_hat, s2_hat, cov_beta, var_s2, var_ls = lognormal_aft_fit(ds)
    m0 = np.zeros(p + 1) if pr.m0 is None else np.broadcast_to(pr.m0, (p + 1,)).astype(float)
    S0 = 1e5 * np.eye(p + 1) if pr.S0 is None else np.atleast_2d(pr.S0)
    a_sigma = 2.0 + s2_hat ** 2 / (100.0 * var_s2) if pr.a_sigma is None else pr.a_sigma
    b_sigma = s2_hat * (a_sigma - 1.0) if pr.b_sigma is None else pr.b_sigma
    S0_chol = np.linalg.cholesky(S0)
    S0_logdet = 2.0 * np.sum(np.log(np.diag(S0_chol)))

    def beta_prior(b_):
        r = np.linalg.solve(S0_chol, b_ - m0)
        return -0.5 * (r @ r) - 0.5 * S0_logdet

    def sigma_prior(ls):
        prec = np.exp(-2.0 * ls)
        return stats.gamma.logpdf(prec, a_sigma, scale=1.0 / b_sigma) + np.log(2.0 * prec)

    fix_alpha = pr.a0 < 0
    _, logdet_ztz = np.linalg.slogdet(ZtZ)

    def node_prior(g_, j, alpha_):
        c = 2.0 * n / (alpha_ * (j + 1) ** 2)
        return (-0.5 * d * np.log(2 * np.pi * c) + 0.5 * logdet_ztz
                - 0.5 * float(g_ @ ZtZ @ g_) / c)

    beta = beta_hat.copy()
    log_sigma = 0.5 * np.log(s2_hat)
    gamma = np.zeros((2 ** L - 1, d))
    fb = FrailtyBlock(ds, frailty, rng, a_tau=pr.a_tau, b_tau=pr.b_tau, a_phi=pr.a_phi,
                      b_phi=pr.b_phi, nu=nu) if frailty else None

    def loc_of(b_, v_):
        loc = data.Xt @ b_
        return loc + v_[ds.unit] if fb is not None else loc

    v = fb.v if fb is not None else np.zeros(ds.m)
    loc = loc_of(beta, v)
    logp = leaf_log_probs(gamma, Zt, L)
    ll = _gaft_terms(data, logp, np.exp(log_sigma), L, loc)
    if not np.isfinite(ll.sum()):
        raise NumericalError("GAFT log-likelihood is not finite at the initial values")

    props = {"beta": AdaptiveProposal(cov_beta), "sigma": AdaptiveProposal([[max(var_ls, 1e-4)]])}
    nodes = [(j, k) for j in range(1, L) for k in range(1, 2 ** j + 1)]
    for j, k in nodes:
        props[f"gamma_{j}_{k}"] = AdaptiveProposal(0.16 * np.eye(d))
    if not fix_alpha:
        props["alpha"] = AdaptiveProposal([[0.16]])
    acc = {b: 0 for b in props}
    tries = {b: 0 for b in props}

    nsave = config.nsave
    out = {"beta": np.empty((nsave, p + 1)), "sigma2": np.empty(nsave),
           "gamma": np.empty((nsave, 2 ** L - 1, d)), "alpha": np.empty(nsave)}
    if fb is not None:
        fb.allocate(out, nsave)
    ll_out = np.empty((nsave, n))
    saved = 0
    for it in range(config.total_iterations):
        post = it >= config.nburn
        sig = float(np.exp(log_sigma))
        cache = {}

        def lp_beta(b_):
            loc_ = loc_of(b_, v)
            l_ = _gaft_terms(data, logp, sig, L, loc_)
            cache[b_.tobytes()] = (loc_, l_)
            return l_.sum() + beta_prior(b_)
        new, ok, _ = adaptive_mh_step(beta, lp_beta, props["beta"], rng,
                                      ll.sum() + beta_prior(beta))
        if ok:
            beta = new
            loc, ll = cache[beta.tobytes()]
        acc["beta"] += ok and post
        tries["beta"] += post

        cache = {}

        def lp_sigma(ls):
            l_ = _gaft_terms(data, logp, float(np.exp(ls[0])), L, loc)
            cache[ls.tobytes()] = l_
            return l_.sum() + sigma_prior(ls[0])
        new, ok, _ = adaptive_mh_step(np.array([log_sigma]), lp_sigma, props["sigma"], rng,
                                      ll.sum() + sigma_prior(log_sigma))
        if ok:
            log_sigma = float(new[0])
            ll = cache[new.tobytes()]
        acc["sigma"] += ok and post
        tries["sigma"] += post
        sig = float(np.exp(log_sigma))
        alpha_ = alpha

        for j, k in nodes:
            idx = node_index(j, k)
            name = f"gamma_{j}_{k}"
            cache = {}

            def lp_node(g_):
                G = gamma.copy()
                G[idx] = g_
                lp_ = leaf_log_probs(G, Zt, L)
                l_ = _gaft_terms(data, lp_, sig, L, loc)
                cache[g_.tobytes()] = (lp_, l_)
                return l_.sum() + node_prior(g_, j, alpha_)
            new, ok, _ = adaptive_mh_step(gamma[idx], lp_node, props[name], rng,
                                          ll.sum() + node_prior(gamma[idx], j, alpha_))
            if ok:
                gamma[idx] = new
                logp, ll = cache[new.tobytes()]
            acc[name] += ok and post
            tries[name] += post

        if not fix_alpha:
            def lp_alpha(la):
                a_ = float(np.exp(la[0]))
                if not 0 < a_ < np.inf:
                    return -np.inf
                return (stats.gamma.logpdf(a_, pr.a0, scale=1.0 / pr.b0) + la[0]
                        + sum(node_prior(gamma[node_index(j, k)], j, a_) for j, k in nodes))
            new, ok, _ = adaptive_mh_step(np.array([np.log(alpha)]), lp_alpha, props["alpha"], rng)
            alpha = float(np.exp(new[0]))
            acc["alpha"] += ok and post
            tries["alpha"] += post

        if fb is not None:
            loc, ll = fb.sweep(loc, ll, lambda l_, rows: _gaft_terms(data, logp, sig, L, l_, rows),
                               rng, post)
            v = fb.v

        if post and (it - config.nburn) % (config.nskip + 1) == config.nskip:
            out["beta"][saved] = beta
            out["sigma2"][saved] = np.exp(2.0 * log_sigma)
            out["gamma"][saved] = gamma
            out["alpha"][saved] = alpha
            if fb is not None:
                fb.record(out, saved)
            ll_out[saved] = ll
            saved += 1
            if config.ndisplay and saved % config.ndisplay == 0:
                log.info("saved %d of %d draws", saved, nsave)

    rates = {b: float(acc[b] / tries[b]) if tries[b] else 0.0 for b in props}
    if fb is not None:
        rates.update(fb.rates())
    meta = {"model": "gaft", "L": L, "frailty": frailty or "none",
            "covariate_names": list(ds.covariate_names),
            "baseline_names": list(ds.baseline_names),
            "x_mean": ds.x_mean.tolist(), "x_sd": ds.x_sd.tolist(),
            "z_center": data.z_center.tolist(), "n": n, "m": ds.m, "seed": config.seed,
            "ZtZ": ZtZ.tolist(), "a_sigma": a_sigma, "b_sigma": b_sigma,
            "fix_alpha": bool(fix_alpha), "nu": nu if frailty == "grf" else None}
    return PosteriorChain(out, ll_out, rates, meta)


def gaft_state_from_draw(chain: PosteriorChain, s: int | None = None, mean: bool = False):
    """``(LdtfpState, frailty vector or None)`` for a saved draw or the posterior mean."""
    meta = chain.meta

    def pick(key):
        return chain[key].mean(axis=0) if mean else chain[key][s]
    gamma = pick("gamma").copy()
    gamma[0] = 0.0
    state = LdtfpState(int(meta["L"]), float(pick("sigma2")), float(pick("alpha")), gamma,
                       pick("beta"), ZtZ=np.asarray(meta["ZtZ"]), n=int(meta["n"]),
                       z_center=np.asarray(meta["z_center"]))
    v = pick("v") if "v" in chain else None
    return state, v


def _upsilon(gamma_draws, L, cols):
    """Stack ``gamma_{l,k,cols}`` over depths ``1..L-1`` (draws in rows)."""
    G = np.asarray(gamma_draws)[:, 1:2 ** L - 1][:, :, cols]
    return G.reshape(G.shape[0], -1)


def _ridge_cov(cov, what):
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        lam = 1e-8 * np.trace(cov) / cov.shape[0]
        warnings.warn(f"singular posterior covariance for {what}; adding ridge {lam:.3g}",
                      RuntimeWarning, stacklevel=3)
        return cov + max(lam, 1e-300) * np.eye(cov.shape[0])


def _bf(draws, prior_covs, what):
    """Savage-Dickey ratio prior(0) / N(0; sample mean, sample cov)."""
    dim = draws.shape[1]
    if draws.shape[0] < 2 * dim:
        raise ValidationError(f"need at least {2 * dim} draws for the {what} Bayes factor")
    num = sum(stats.multivariate_normal(np.zeros(c.shape[0]), c).logpdf(np.zeros(c.shape[0]))
              for c in prior_covs)
    cov = _ridge_cov(np.atleast_2d(np.cov(draws.T)), what)
    den = stats.multivariate_normal(draws.mean(0), cov).logpdf(np.zeros(dim))
    with np.errstate(over="ignore"):
        return float(np.exp(num - den))


def gaft_bayes_factors(gamma_draws, alpha_hat: float, ZtZ, n: int, L: int,
                       names=None) -> dict:
    """Savage-Dickey Bayes factors for the LDTFP tree coefficients.

    Returns per-covariate factors (``H0: Upsilon_j = 0``), ``"overall"``
    (all non-intercept coefficients, i.e. covariate dependence) and
    ``"normality"`` (every coefficient, i.e. ``G_z = Phi_sigma``).
    """
    if L < 2:
        raise ValidationError("Bayes factors need tree depth L >= 2")
    ZtZ = _check_ztz(ZtZ)
    Sinv = np.linalg.inv(ZtZ)
    d = ZtZ.shape[0]
    q = d - 1
    names = list(names) if names is not None else [f"z{j}" for j in range(1, q + 1)]
    scales = [2.0 * n / (alpha_hat * (l + 1) ** 2) for l in range(1, L) for _ in range(2 ** l)]
    out = {}
    for j in range(1, q + 1):
        covs = [np.array([[c * Sinv[j, j]]]) for c in scales]
        out[names[j - 1]] = _bf(_upsilon(gamma_draws, L, [j]), covs, names[j - 1])
    if q:
        rest = list(range(1, d))
        sub = Sinv[np.ix_(rest, rest)]
        out["overall"] = _bf(_upsilon(gamma_draws, L, rest), [c * sub for c in scales], "overall")
    out["normality"] = _bf(_upsilon(gamma_draws, L, list(range(d))), [c * Sinv for c in scales],
                           "normality")
    return out


def gaft_survival(state: LdtfpState, x, z, t, v: float = 0.0) -> np.ndarray:
    """``S(t | x, z) = 1 - G_z(log t - x~'beta~ - v)`` for raw covariates."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValidationError("survival evaluated at t <= 0")
    mu = state.beta[0] + np.dot(np.atleast_1d(x), state.beta[1:]) + v
    e = np.atleast_1d(np.log(t) - mu)
    logp = leaf_log_probs(state.gamma, _state_design(state, z, e.size), state.L)
    _, _, logS = _ldtfp_logs(logp, state.sigma, state.L, np.atleast_1d(e))
    return np.exp(logS)


def gaft_log_survival(ds, state: LdtfpState, t, idx, frailty=None) -> np.ndarray:
    """``log S(t_k)`` for observation ``idx[k]`` of ``ds`` (covariates on the fitted scale)."""
    t = np.asarray(t, dtype=float)
    idx = np.asarray(idx, dtype=int)
    if np.any(~(t > 0)):
        raise ValidationError("survival evaluated at t <= 0")
    data = _GaftData(ds, state.z_center if state.z_center.size else None)
    loc = data.Xt[idx] @ state.beta
    if frailty is not None:
        loc = loc + np.asarray(getattr(frailty, "v", frailty))[ds.unit[idx]]
    logp = leaf_log_probs(state.gamma, data.Zt[idx], state.L)
    _, _, logS = _ldtfp_logs(logp, state.sigma, state.L, np.log(t) - loc)
    return logS
