"""Adaptive Metropolis machinery and the AFT/PH/PO frailty sampler."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize, stats

from .baseline import CenteringFamily, TbpState, tbp_log_prior, weights_from_z
from .errors import NumericalError, StructureError, ValidationError
from .frailty import (FrailtyState, check_connected, correlation_matrix, dense_precision,
                      greedy_coloring, phi_prior_default, tau2_gibbs)
from .fsa import FsaPlan, fsa_design, powered_exponential
from .semimodels import (CensoredLikelihood, ModelSpec, SurvregPriors, link_log,
                         selection_covariance, selection_g)

log = logging.getLogger("spsurv")


@dataclass
class ChainConfig:
    """Run length, thinning, display interval and seed of one chain."""

    nburn: int = 5000
    nsave: int = 2000
    nskip: int = 4
    ndisplay: int = 1000
    seed: int = 0
    init_param_mcmc: bool = True

    def __post_init__(self):
        for name in ("nburn", "nsave", "nskip", "ndisplay"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValidationError(f"{name} must be a nonnegative integer")
            setattr(self, name, int(value))
        if self.nsave < 1:
            raise ValidationError("nsave must be at least 1")

    @property
    def total_iterations(self) -> int:
        return self.nburn + self.nsave * (self.nskip + 1)


class AdaptiveProposal:
    """Gaussian random-walk proposal with Haario-style covariance adaptation.

    Until ``t0`` states have been recorded the proposal covariance is
    ``cov_init``; afterwards it is ``s_d * (C_t + lam * I)`` with ``C_t`` the
    running sample covariance of all recorded states.
    """

    def __init__(self, cov_init, t0: int | None = None, lam: float = 1e-6):
        cov = np.atleast_2d(np.asarray(cov_init, dtype=float))
        self.d = cov.shape[0]
        if cov.shape != (self.d, self.d):
            raise ValidationError("initial proposal covariance must be square")
        self.cov_init = 0.5 * (cov + cov.T)
        try:
            self._chol_init = linalg.cholesky(self.cov_init, lower=True)
        except linalg.LinAlgError:
            raise ValidationError("initial proposal covariance is not positive definite") from None
        self.t0 = max(100, 2 * self.d) if t0 is None else int(t0)
        self.lam = float(lam)
        self.scale = 2.38 ** 2 / self.d
        self.n = 0
        self.mean = np.zeros(self.d)
        self._m2 = np.zeros((self.d, self.d))

    def update(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self._m2 += np.outer(delta, x - self.mean)

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros((self.d, self.d))
        return self._m2 / (self.n - 1)

    @property
    def adapting(self) -> bool:
        return self.n >= self.t0

    def proposal_cov(self) -> np.ndarray:
        if not self.adapting:
            return self.cov_init
        return self.scale * (self.covariance() + self.lam * np.eye(self.d))

    def propose(self, x, rng) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        chol = self._chol_init
        if self.adapting:
            try:
                chol = linalg.cholesky(self.proposal_cov(), lower=True)
            except linalg.LinAlgError:
                pass
        return x + chol @ rng.standard_normal(self.d)


def adaptive_mh_step(x, log_post, proposal: AdaptiveProposal, rng, current=None):
    """One random-walk Metropolis step followed by a moment update.

    Returns ``(new_state, accepted, new_log_post)``.  A non-finite
    log-posterior at the proposal counts as a rejection.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    current = log_post(x) if current is None else current
    y = proposal.propose(x, rng)
    logu = np.log(rng.uniform())
    lp = log_post(y)
    accepted = bool(np.isfinite(lp) and logu < lp - current)
    new, new_lp = (y, lp) if accepted else (x, current)
    proposal.update(new)
    return new, accepted, new_lp


@dataclass
class PosteriorChain:
    """Saved draws, per-observation log-likelihood and acceptance rates."""

    draws: dict
    loglik: np.ndarray
    acceptance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ns = self.loglik.shape[0]
        for k, v in self.draws.items():
            if v.shape[0] != ns:
                raise ValidationError(f"block {k!r} has {v.shape[0]} draws, expected {ns}")
        for k, r in self.acceptance.items():
            if not 0.0 <= r <= 1.0:
                raise ValidationError(f"acceptance rate of {k!r} outside [0, 1]")

    def __getitem__(self, key):
        return self.draws[key]

    def __contains__(self, key):
        return key in self.draws

    @property
    def nsave(self) -> int:
        return self.loglik.shape[0]

    def save(self, path):
        arrays = {f"draw__{k}": v for k, v in self.draws.items()}
        np.savez_compressed(path, loglik=self.loglik,
                            acceptance=json.dumps(self.acceptance, sort_keys=True),
                            meta=json.dumps(self.meta, sort_keys=True), **arrays)

    @classmethod
    def load(cls, path) -> "PosteriorChain":
        with np.load(path, allow_pickle=False) as f:
            draws = {k[len("draw__"):]: f[k] for k in f.files if k.startswith("draw__")}
            return cls(draws, f["loglik"], json.loads(str(f["acceptance"])),
                       json.loads(str(f["meta"])))


@dataclass
class InitResult:
    """Parametric point estimates and covariances used for defaults."""

    theta: np.ndarray
    beta: np.ndarray
    V: np.ndarray
    S: np.ndarray
    method: str
    v: np.ndarray | None = None
    tau2: float | None = None
    phi: float | None = None


def numerical_hessian(f, x, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4.0 * h[i] * h[j])
    return H


def _moment_theta(ds, tag):
    t = np.where(np.isfinite(ds.b), 0.5 * (ds.a + ds.b), ds.a)
    t = t[t > 0]
    if t.size < 2:
        return np.zeros(2)
    lt = np.log(t)
    s = max(lt.std(ddof=1), 1e-3)
    return np.array([-lt.mean(), -np.log(s)])


def _is_pd(M) -> bool:
    try:
        linalg.cholesky(M, lower=True)
        return bool(np.all(np.isfinite(M)))
    except (linalg.LinAlgError, ValueError):
        return False


def parametric_mle(ds, link: str, tag: str):
    """Maximize the parametric non-frailty log-likelihood by BFGS.

    Returns ``(theta, beta, V, S, method)``; falls back to moment
    estimates with a warning when the optimizer fails.
    """
    p = ds.p
    lik = CensoredLikelihood(ds.u, ds.a, ds.b)
    X = ds.X

    def negll(par):
        theta, beta = par[:2], par[2:]
        eta = X @ beta if p else np.zeros(ds.n)
        if not np.all(np.isfinite(par)) or abs(theta[1]) > 30:
            return np.inf
        try:
            ll = lik.terms(lambda t, idx: link_log(link, None, tag, theta, eta[idx], t))
        except NumericalError:
            return np.inf
        s = ll.sum()
        return -s if np.isfinite(s) else np.inf

    x0 = np.concatenate([_moment_theta(ds, tag), np.zeros(p)])
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = optimize.minimize(negll, x0, method="BFGS")
    ok = np.isfinite(res.fun) and (res.success or np.linalg.norm(res.jac, np.inf) < 1e-2)
    if not ok:
        warnings.warn("parametric initialization did not converge; using moment estimates",
                      RuntimeWarning, stacklevel=2)
        return x0[:2], x0[2:], 0.1 * np.eye(2), 0.1 * np.eye(p), "moments"
    with np.errstate(all="ignore"):
        H = numerical_hessian(negll, res.x)
    cov = None
    if np.all(np.isfinite(H)) and _is_pd(H):
        cov = np.linalg.inv(H)
    if cov is None or not _is_pd(cov):
        cov = np.asarray(res.hess_inv)
    if not _is_pd(cov):
        cov = 0.1 * np.eye(p + 2)
    cov = 0.5 * (cov + cov.T)
    return res.x[:2], res.x[2:], cov[:2, :2], cov[2:, 2:], "mle"


def init_parametric(ds, spec: ModelSpec, config: ChainConfig) -> InitResult:
    """Empirical-Bayes starting values and proposal covariances.

    The parametric non-frailty model is fitted by quasi-Newton.  With
    ``config.init_param_mcmc`` a parametric (``alpha = inf``) pilot chain of
    5000 + 5000 iterations, including the frailty structure, refines the
    estimates to posterior means and covariances.
    """
    theta, beta, V, S, method = parametric_mle(ds, spec.link, spec.baseline.family.tag)
    out = InitResult(theta, beta, V, S, method)
    if not config.init_param_mcmc:
        return out
    fam = CenteringFamily(spec.baseline.family.tag, tuple(theta))
    pilot_spec = replace(spec, baseline=TbpState.uniform(spec.baseline.L, fam, np.inf),
                         beta=beta.copy(), gamma=None,
                         priors=replace(spec.priors, a0=-1.0))
    pilot_cfg = ChainConfig(nburn=5000, nsave=5000, nskip=0, ndisplay=config.ndisplay,
                            seed=config.seed, init_param_mcmc=False)
    chain = run_chain(ds, pilot_spec, pilot_cfg, init=out)
    th, be = chain["theta"], chain["beta"]
    Vp = np.atleast_2d(np.cov(th.T))
    Sp = np.atleast_2d(np.cov(be.T)) if be.shape[1] else np.zeros((0, 0))
    out = InitResult(th.mean(0), be.mean(0), Vp if _is_pd(Vp) else V,
                     Sp if (Sp.size == 0 or _is_pd(Sp)) else S, "pilot")
    if "v" in chain:
        out.v = chain["v"].mean(0)
        out.tau2 = float(chain["tau2"].mean())
    if "phi" in chain:
        out.phi = float(chain["phi"].mean())
    return out


def _mvn_logpdf_factory(mean, cov):
    mean = np.asarray(mean, dtype=float)
    if mean.size == 0:
        return lambda x: 0.0
    chol = linalg.cholesky(np.atleast_2d(cov), lower=True)
    const = -0.5 * mean.size * np.log(2 * np.pi) - np.sum(np.log(np.diag(chol)))

    def logpdf(x):
        r = linalg.solve_triangular(chol, np.asarray(x) - mean, lower=True)
        return const - 0.5 * float(r @ r)
    return logpdf


class _SpatialCov:
    """Correlation matrix of GRF frailties: dense for small ``m``, FSA otherwise."""

    def __init__(self, coords, nu, priors: SurvregPriors, rng):
        self.coords = coords
        self.nu = nu
        self.m = coords.shape[0]
        self.use_fsa = self.m > priors.fsa_threshold
        if self.use_fsa:
            K = min(priors.K, self.m)
            self.knots, self.blocks = fsa_design(coords, K, priors.B, rng=rng)

    def build(self, phi):
        """``(precision, logdet)`` at range ``phi``."""
        if self.use_fsa:
            plan = FsaPlan(self.coords, powered_exponential(phi, self.nu), self.knots,
                           self.blocks)
            return plan.precision(), plan.logdet()
        return dense_precision(correlation_matrix(self.coords, phi, self.nu))


def _validate_frailty(ds, kind):
    st = ds.structure
    if kind == "car":
        if st.kind != "areal":
            raise StructureError("CAR frailties require an adjacency matrix")
        check_connected(st.adjacency)
    elif kind == "grf":
        if st.kind != "geo":
            raise StructureError("GRF frailties require coordinates")
        if np.unique(st.coords, axis=0).shape[0] < st.m:
            raise StructureError("GRF frailties require distinct unit coordinates")
    elif kind == "iid":
        if st.m < 2:
            raise StructureError("IID frailties require at least two units")


class FrailtyBlock:
    """Frailty vector with its variance and (GRF) range, plus their updates.

    Shared by every sampler whose linear predictor contains ``v[unit]``.
    """

    def __init__(self, ds, kind: str, rng, *, v=None, tau2: float = 1.0, phi=None,
                 nu: float = 1.0, a_tau: float = 0.001, b_tau: float = 0.001,
                 a_phi: float = 2.0, b_phi=None, priors: SurvregPriors | None = None):
        _validate_frailty(ds, kind)
        self.kind = kind
        self.unit = ds.unit
        self.m = ds.m
        self.n = ds.n
        self.a_tau, self.b_tau = a_tau, b_tau
        v = np.zeros(self.m) if v is None else np.asarray(v, dtype=float)
        self.v = v.copy() if v.shape == (self.m,) else np.zeros(self.m)
        self.tau2 = float(tau2)
        self.phi = None
        self.nu = nu
        self.E = self.e_plus = self.coloring = self.P = None
        if kind == "car":
            self.E = ds.structure.adjacency
            self.e_plus = self.E.sum(axis=1)
            self.coloring = greedy_coloring(self.E)
            self.v = self.v - self.v.mean()
        if kind == "grf":
            coords = ds.structure.coords
            self.a_phi, b_def = phi_prior_default(coords, nu, a_phi)
            self.b_phi = b_def if b_phi is None else b_phi
            self.phi = float(phi) if phi else (self.a_phi - 1.0) / self.b_phi
            self.spcov = _SpatialCov(coords, nu, priors or SurvregPriors(), rng)
            self.P, self.logdet = self.spcov.build(self.phi)
            self.phi_prop = AdaptiveProposal([[0.16]])
        self.acc = {"v": 0.0, "phi": 0}
        self.tries = {"v": 0, "phi": 0}

    @property
    def blocks(self):
        return ["v", "phi"] if self.kind == "grf" else ["v"]

    def sweep(self, eta, ll, loglik_rows, rng, post_burn: bool):
        """Update ``v``, ``tau2`` and ``phi``; returns the new ``(eta, ll)``."""
        self.v, eta, ll, n_acc = _update_frailties(
            self.kind, self.v, self.tau2, eta, ll, rng, self.unit, self.m, loglik_rows,
            E=self.E, e_plus=self.e_plus, coloring=self.coloring, P=self.P)
        if self.kind == "car":
            shift = self.v.mean()
            if shift != 0.0:
                self.v = self.v - shift
                eta = eta - shift
                ll = loglik_rows(eta, np.arange(self.n))
        self.acc["v"] += n_acc / self.m * post_burn
        self.tries["v"] += post_burn
        if self.kind == "grf":
            self.tau2 = tau2_gibbs(self.v, "grf", self.a_tau, self.b_tau, rng, precision=self.P)
            self._update_phi(rng, post_burn)
        else:
            self.tau2 = tau2_gibbs(self.v, self.kind, self.a_tau, self.b_tau, rng, E=self.E)
        return eta, ll

    def _update_phi(self, rng, post_burn):
        built = {}
        v, tau2 = self.v, self.tau2

        def lp_phi(lphi):
            ph = float(np.exp(lphi[0]))
            if not 0 < ph < np.inf:
                return -np.inf
            if lphi.tobytes() not in built:
                try:
                    built[lphi.tobytes()] = self.spcov.build(ph)
                except NumericalError:
                    return -np.inf
            P_, ld_ = built[lphi.tobytes()]
            return (stats.gamma.logpdf(ph, self.a_phi, scale=1.0 / self.b_phi) + lphi[0]
                    - 0.5 * ld_ - 0.5 * float(v @ P_ @ v) / tau2)
        x = np.array([np.log(self.phi)])
        built[x.tobytes()] = (self.P, self.logdet)
        lphi, ok, _ = adaptive_mh_step(x, lp_phi, self.phi_prop, rng)
        if ok:
            self.phi = float(np.exp(lphi[0]))
            self.P, self.logdet = built[lphi.tobytes()]
        self.acc["phi"] += ok and post_burn
        self.tries["phi"] += post_burn

    def allocate(self, out, nsave):
        out["v"] = np.empty((nsave, self.m))
        out["tau2"] = np.empty(nsave)
        if self.kind == "grf":
            out["phi"] = np.empty(nsave)

    def record(self, out, s):
        out["v"][s] = self.v
        out["tau2"][s] = self.tau2
        if self.kind == "grf":
            out["phi"][s] = self.phi

    def rates(self):
        return {b: float(self.acc[b] / self.tries[b]) if self.tries[b] else 0.0
                for b in self.blocks}


def run_chain(ds, spec: ModelSpec, config: ChainConfig, *, selection: bool = False,
              prior_only: bool = False, init: InitResult | None = None,
              progress=None) -> PosteriorChain:
    """Sample the posterior of an AFT/PH/PO model with TBP baseline.

    Parameters
    ----------
    ds : SurvDataset
    spec : ModelSpec
        Link, initial baseline (``alpha`` gives the starting or fixed
        concentration; ``inf`` with ``a0 < 0`` fits the parametric model),
        frailty kind and priors.  ``None`` prior entries take the default
        empirical-Bayes values.
    config : ChainConfig
    selection : bool
        Spike-and-slab selection with a g-prior on ``beta``.
    prior_only : bool
        Replace the likelihood by zero (checks the sampler against the prior).
    init : InitResult, optional
        Skip the parametric initialization.
    progress : callable, optional
        Called with ``(saved, nsave)`` every ``ndisplay`` saved draws.
    """
    rng = np.random.default_rng(config.seed)
    pr = spec.priors
    p, n, m = ds.p, ds.n, ds.m
    L = spec.baseline.L
    tag = spec.baseline.family.tag
    link = spec.link
    fkind = spec.frailty.kind if spec.frailty is not None else None
    if fkind is not None:
        _validate_frailty(ds, fkind)
    if spec.beta.size != p:
        raise ValidationError(f"beta has length {spec.beta.size}, dataset has p={p}")

    fix_alpha = pr.a0 < 0
    alpha = float(spec.baseline.alpha)
    parametric = fix_alpha and np.isinf(alpha)
    if not fix_alpha and not np.isfinite(alpha):
        alpha = 1.0
    update_z = not parametric and L > 1

    if init is None:
        if prior_only:
            S_hat = np.atleast_2d(pr.S0) if pr.S0 is not None else np.eye(p)
            V_hat = np.atleast_2d(pr.V0) if pr.V0 is not None else np.eye(2)
            init = InitResult(np.asarray(spec.baseline.family.theta), spec.beta.copy(),
                              V_hat, S_hat, "given")
        else:
            init = init_parametric(ds, spec, config)

    beta0 = np.zeros(p) if pr.beta0 is None else np.broadcast_to(pr.beta0, (p,)).astype(float)
    S0 = 1e10 * np.eye(p) if pr.S0 is None else np.atleast_2d(np.asarray(pr.S0, dtype=float))
    theta0 = init.theta if pr.theta0 is None else np.asarray(pr.theta0, dtype=float)
    V0 = 10.0 * init.V if pr.V0 is None else np.atleast_2d(np.asarray(pr.V0, dtype=float))

    X = ds.X
    g = None
    if selection:
        Xc = X - X.mean(axis=0)
        if np.max(np.abs(X.mean(axis=0)), initial=0.0) > 1e-8:
            raise ValidationError("selection requires mean-centered covariates")
        g = selection_g(pr.M, pr.q, p)
        beta_prior = _mvn_logpdf_factory(np.zeros(p), selection_covariance(Xc, g))
    else:
        beta_prior = _mvn_logpdf_factory(beta0, S0)
    theta_prior = _mvn_logpdf_factory(theta0, V0)

    beta = np.asarray(init.beta, dtype=float).copy()
    theta = np.asarray(init.theta, dtype=float).copy()
    gamma = spec.gamma.copy() if selection else np.ones(p, dtype=int)
    z = np.zeros(L - 1)
    if update_z and not np.allclose(spec.baseline.w, 1.0 / L):
        z = spec.baseline.z.copy()
    w = None if parametric else weights_from_z(z)

    unit = ds.unit
    fb = None
    v = np.zeros(m)
    if fkind is not None:
        fb = FrailtyBlock(ds, fkind, rng, v=init.v if init.v is not None else spec.frailty.v,
                          tau2=init.tau2 if init.tau2 is not None else spec.frailty.tau2,
                          phi=init.phi or spec.frailty.phi, nu=spec.frailty.nu,
                          a_tau=pr.a_tau, b_tau=pr.b_tau, a_phi=pr.a_phi, b_phi=pr.b_phi,
                          priors=pr)
        v = fb.v

    lik = CensoredLikelihood(ds.u, ds.a, ds.b)

    def eta_of(beta_, v_):
        e = X @ (beta_ * gamma) if p else np.zeros(n)
        return e + v_[unit] if fkind is not None else e

    def loglik(eta, theta_, w_, rows=None):
        if prior_only:
            return np.zeros(n if rows is None else rows.size)
        return lik.terms(lambda t, idx: link_log(link, w_, tag, theta_, eta[idx], t), rows)

    eta = eta_of(beta, v)
    ll = loglik(eta, theta, w)
    if not np.isfinite(ll.sum()):
        raise NumericalError("log-likelihood is not finite at the initial values")

    props = {}
    if p:
        S_init = init.S if init.S.size else np.eye(p)
        if selection:
            S_init = selection_covariance(X - X.mean(0), g) if not _is_pd(S_init) else S_init
        props["beta"] = AdaptiveProposal(S_init)
    props["theta"] = AdaptiveProposal(init.V)
    if update_z:
        props["z"] = AdaptiveProposal(0.16 * np.eye(L - 1))
    if not fix_alpha:
        props["alpha"] = AdaptiveProposal([[0.16]])
    blocks = list(props)
    if selection:
        blocks.append("gamma")
    acc = {b: 0 for b in blocks}
    tries = {b: 0 for b in blocks}

    nsave, total = config.nsave, config.total_iterations
    out = {"beta": np.empty((nsave, p)), "theta": np.empty((nsave, 2))}
    if not parametric:
        out["w"] = np.empty((nsave, L))
        if L > 1:
            out["z"] = np.empty((nsave, L - 1))
        out["alpha"] = np.empty(nsave)
    if fb is not None:
        fb.allocate(out, nsave)
    if selection:
        out["gamma"] = np.empty((nsave, p), dtype=int)
    ll_out = np.empty((nsave, n))

    def check(name, value):
        if not np.isfinite(value):
            raise NumericalError(f"block {name!r} is stuck at a non-finite log posterior")

    saved = 0
    for it in range(total):
        post_burn = it >= config.nburn

        if p:
            cur = ll.sum() + beta_prior(beta)
            check("beta", cur)
            cache = {}

            def lp_beta(b_):
                e_ = eta_of(b_, v)
                l_ = loglik(e_, theta, w)
                cache[b_.tobytes()] = (e_, l_)
                return l_.sum() + beta_prior(b_)
            beta_new, ok, _ = adaptive_mh_step(beta, lp_beta, props["beta"], rng, cur)
            if ok:
                beta = beta_new
                eta, ll = cache[beta.tobytes()]
            acc["beta"] += ok and post_burn
            tries["beta"] += post_burn

        cur = ll.sum() + theta_prior(theta)
        check("theta", cur)
        cache = {}

        def lp_theta(th):
            if abs(th[1]) > 30:
                return -np.inf
            l_ = loglik(eta, th, w)
            cache[th.tobytes()] = l_
            return l_.sum() + theta_prior(th)
        theta_new, ok, _ = adaptive_mh_step(theta, lp_theta, props["theta"], rng, cur)
        if ok:
            theta = theta_new
            ll = cache[theta.tobytes()]
        acc["theta"] += ok and post_burn
        tries["theta"] += post_burn

        if update_z:
            cur = ll.sum() + tbp_log_prior(w, alpha, z_coords=True)
            check("z", cur)
            cache = {}

            def lp_z(z_):
                w_ = weights_from_z(z_)
                if np.any(w_ <= 0):
                    return -np.inf
                l_ = loglik(eta, theta, w_)
                cache[z_.tobytes()] = (w_, l_)
                return l_.sum() + tbp_log_prior(w_, alpha, z_coords=True)
            z_new, ok, _ = adaptive_mh_step(z, lp_z, props["z"], rng, cur)
            if ok:
                z = z_new
                w, ll = cache[z.tobytes()]
            acc["z"] += ok and post_burn
            tries["z"] += post_burn

        if not fix_alpha:
            def lp_alpha(la):
                a_ = float(np.exp(la[0]))
                if not 0 < a_ < np.inf:
                    return -np.inf
                return (stats.gamma.logpdf(a_, pr.a0, scale=1.0 / pr.b0) + la[0]
                        + tbp_log_prior(w, a_))
            la, ok, _ = adaptive_mh_step(np.array([np.log(alpha)]), lp_alpha, props["alpha"], rng)
            alpha = float(np.exp(la[0]))
            acc["alpha"] += ok and post_burn
            tries["alpha"] += post_burn

        if fb is not None:
            eta, ll = fb.sweep(eta, ll, lambda e_, rows: loglik(e_, theta, w, rows), rng,
                               post_burn)
            v = fb.v

        if selection:
            n_flip = 0
            for j in range(p):
                gamma_prop = gamma.copy()
                gamma_prop[j] = 1 - gamma_prop[j]
                e_ = X @ (beta * gamma_prop) + (v[unit] if fkind is not None else 0.0)
                l_ = loglik(e_, theta, w)
                if np.log(rng.uniform()) < l_.sum() - ll.sum():
                    gamma, eta, ll = gamma_prop, e_, l_
                    n_flip += 1
            acc["gamma"] += n_flip / p * post_burn
            tries["gamma"] += post_burn

        if post_burn and (it - config.nburn) % (config.nskip + 1) == config.nskip:
            out["beta"][saved] = beta
            out["theta"][saved] = theta
            if not parametric:
                out["w"][saved] = w
                if L > 1:
                    out["z"][saved] = z
                out["alpha"][saved] = alpha
            if fb is not None:
                fb.record(out, saved)
            if selection:
                out["gamma"][saved] = gamma
            ll_out[saved] = ll
            saved += 1
            if config.ndisplay and saved % config.ndisplay == 0:
                log.info("saved %d of %d draws", saved, nsave)
                if progress is not None:
                    progress(saved, nsave)

    rates = {b: float(acc[b] / tries[b]) if tries[b] else 0.0 for b in blocks}
    if fb is not None:
        rates.update(fb.rates())
    meta = {
        "model": f"survreg-{link.lower()}", "link": link, "family": tag, "L": int(L),
        "parametric": bool(parametric), "fix_alpha": bool(fix_alpha),
        "alpha_fixed_value": None if not fix_alpha or parametric else alpha,
        "frailty": fkind or "none", "selection": bool(selection),
        "covariate_names": list(ds.covariate_names),
        "x_mean": ds.x_mean.tolist(), "x_sd": ds.x_sd.tolist(),
        "n": int(n), "m": int(m), "seed": int(config.seed),
        "init_method": init.method, "prior_only": bool(prior_only),
        "theta0": np.asarray(theta0).tolist(), "V0": np.asarray(V0).tolist(),
        "g": g, "nu": spec.frailty.nu if fkind == "grf" else None,
    }
    return PosteriorChain(out, ll_out, rates, meta)


def _update_frailties(kind, v, tau2, eta, ll, rng, unit, m, loglik_rows, *, E=None,
                      e_plus=None, coloring=None, P=None):
    """One Metropolis sweep over the frailties.

    Every ``v_i`` is proposed from ``N(v_i, conditional prior variance)``.
    Unit ``i``'s likelihood depends on ``v_i`` alone, so all proposal
    likelihoods are evaluated in one pass; the prior part of the acceptance
    ratio is then applied sequentially (GRF) or per independent color class
    (ICAR), which is exactly a Gauss-Seidel sweep.
    """
    n = eta.size
    if kind == "car":
        cond_var = tau2 / e_plus
    elif kind == "iid":
        cond_var = np.full(m, tau2)
    else:
        cond_var = tau2 / np.diag(P)
    eps = rng.standard_normal(m)
    logu = np.log(rng.uniform(size=m))
    v_prop = v + np.sqrt(cond_var) * eps
    eta_prop = eta + (v_prop - v)[unit]
    rows = np.arange(n)
    ll_prop = loglik_rows(eta_prop, rows)
    dll = np.bincount(unit, weights=ll_prop - ll, minlength=m)
    dll = np.where(np.isfinite(dll), dll, -np.inf)

    accept = np.zeros(m, dtype=bool)
    v_new = v.copy()
    if kind == "iid":
        dprior = -(v_prop ** 2 - v ** 2) / (2.0 * tau2)
        accept = logu < dll + dprior
        v_new = np.where(accept, v_prop, v)
    elif kind == "car":
        for cls in coloring:
            mean = (E[cls] @ v_new) / e_plus[cls]
            dprior = -((v_prop[cls] - mean) ** 2 - (v_new[cls] - mean) ** 2) / (2.0 * cond_var[cls])
            ok = logu[cls] < dll[cls] + dprior
            accept[cls] = ok
            v_new[cls[ok]] = v_prop[cls[ok]]
    else:
        r = P @ v_new
        diag = np.diag(P)
        for i in range(m):
            mean = -(r[i] - diag[i] * v_new[i]) / diag[i]
            dprior = -((v_prop[i] - mean) ** 2 - (v_new[i] - mean) ** 2) / (2.0 * cond_var[i])
            if logu[i] < dll[i] + dprior:
                delta = v_prop[i] - v_new[i]
                v_new[i] = v_prop[i]
                r += P[:, i] * delta
                accept[i] = True
    take = accept[unit]
    eta_new = np.where(take, eta_prop, eta)
    ll_new = np.where(take, ll_prop, ll)
    return v_new, eta_new, ll_new, int(accept.sum())


def update_frailties(ds, spec: ModelSpec, rng, theta=None, prior_only: bool = False):
    """One frailty sweep for a fixed model state; returns the new ``v``."""
    fkind = spec.frailty.kind
    _validate_frailty(ds, fkind)
    fam = spec.baseline.family
    theta = np.asarray(fam.theta if theta is None else theta)
    lik = CensoredLikelihood(ds.u, ds.a, ds.b)
    X, unit, m = ds.X, ds.unit, ds.m

    def loglik_rows(e_, rows):
        if prior_only:
            return np.zeros(rows.size)
        return lik.terms(lambda t, idx: link_log(spec.link, spec.w, fam.tag, theta, e_[idx], t),
                         rows)
    v = np.asarray(spec.frailty.v, dtype=float)
    eta = X @ (spec.beta * spec.gamma) + v[unit]
    ll = loglik_rows(eta, np.arange(ds.n))
    kw = {}
    if fkind == "car":
        E = ds.structure.adjacency
        kw = dict(E=E, e_plus=E.sum(axis=1), coloring=greedy_coloring(E))
    elif fkind == "grf":
        kw = dict(P=dense_precision(correlation_matrix(
            ds.structure.coords, spec.frailty.phi, spec.frailty.nu))[0])
    v_new, *_ = _update_frailties(fkind, v, spec.frailty.tau2, eta, ll, rng, unit, m,
                                  loglik_rows, **kw)
    if fkind == "car":
        v_new = v_new - v_new.mean()
    return v_new


def spec_from_draw(chain: PosteriorChain, s: int | None = None, base: ModelSpec | None = None,
                   mean: bool = False) -> ModelSpec:
    """Model state of saved draw ``s`` (or the posterior mean with ``mean=True``).

    Posterior means average ``w`` rather than ``z``.
    """
    meta = chain.meta

    def pick(key):
        arr = chain[key]
        return arr.mean(axis=0) if mean else arr[s]
    theta = pick("theta")
    fam = CenteringFamily(meta["family"], tuple(theta))
    L = int(meta["L"])
    if "w" in chain:
        w = pick("w")
        alpha = float(pick("alpha"))
        baseline = TbpState(w / w.sum(), alpha, fam)
    else:
        baseline = TbpState.uniform(L, fam, np.inf)
    frailty = None
    if "v" in chain:
        frailty = FrailtyState(meta["frailty"], pick("v"), float(pick("tau2")),
                               phi=float(pick("phi")) if "phi" in chain else None,
                               nu=meta.get("nu") or 1.0)
    gamma = None
    if "gamma" in chain:
        gamma = (np.rint(pick("gamma")).astype(int) if not mean
                 else np.ones(chain["gamma"].shape[1], dtype=int))
    beta = pick("beta")
    if mean and "gamma" in chain:
        beta = (chain["beta"] * chain["gamma"]).mean(axis=0)
    return ModelSpec(meta["link"], baseline, beta, frailty, gamma)
