"""Command-line front end.

``spsurv fit CONFIG`` samples a model described by a YAML file and writes a
run directory; ``predict``, ``residuals`` and ``summarize`` post-process a
run directory; ``simulate`` writes synthetic datasets.  Exit codes: 0 on
success, 1 for invalid input or configuration, 2 for numerical failures.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .baseline import FAMILIES, CenteringFamily, TbpState
from .copula import COPULA_MODELS, CopulaPriors, copula_survival, run_copula, _validate_copula_data
from .copula import DdpState, PiecewiseExpBaseline, lddpm_log, pe_log, _sticks_from_w
from .errors import NumericalError, SpsurvError, ValidationError
from .frailty import FrailtyState
from .gaft import (GaftPriors, gaft_bayes_factors, gaft_log_likelihood, gaft_log_survival,
                   gaft_state_from_draw, gaft_survival, run_gaft)
from .mcmc import ChainConfig, PosteriorChain, _validate_frailty, run_chain, spec_from_draw
from .modelcheck import (coxsnell_slopes, dic, lpml, model_frequencies, posterior_summary,
                         residual_intervals, savage_dickey_bf, waic)
from .semimodels import ModelSpec, SurvregPriors, link_log, linear_predictor, log_likelihood
from .simulate import simulate_copula, simulate_survreg
from .survdata import load_dataset, standardize_covariates, write_adjacency, write_dataset

log = logging.getLogger("spsurv")

SURVREG_MODELS = ("survreg-aft", "survreg-ph", "survreg-po")
MODELS = SURVREG_MODELS + ("gaft",) + COPULA_MODELS
FRAILTIES = ("car", "grf", "iid", "none")

CONFIG_NAME = "config.yaml"
CHAINS_DIR = "chains"
SUMMARY_NAME = "summary.txt"
DIAG_DIR = "diagnostics"
LOG_DIR = "logs"
MANIFEST_NAME = "manifest.json"

DIC_PLUGIN_NOTE = {
    "survreg": "posterior means of beta, theta, v, tau2, phi and w (not z)",
    "gaft": "posterior means of beta, sigma2, tree coefficients and v",
    "coxph": "posterior means of beta and h",
    "ddp": "log of the posterior-mean marginal density (mixture atoms are not identified)",
}


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def _as_float(value, what):
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ValidationError(f"{what} must be a number, got {value!r}") from None
    return value


@dataclass
class FitConfig:
    """Resolved fit configuration (see the README for the file layout)."""

    model: str
    data: str
    schema: dict = field(default_factory=dict)
    frailty: str = "none"
    adjacency: str | None = None
    family: str = "loglogistic"
    selection: bool = False
    scale_covariates: bool = True
    fix_alpha: bool = False
    alpha: float | None = None
    nu: float = 1.0
    prior: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "FitConfig":
        d = copy.deepcopy(d or {})
        if not isinstance(d, dict):
            raise ValidationError("configuration must be a mapping")
        data = d.pop("data", None)
        if not isinstance(data, dict) or "path" not in data:
            raise ValidationError("configuration needs data.path")
        unknown_data = set(data) - {"path", "schema", "adjacency"}
        if unknown_data:
            raise ValidationError(f"unknown data keys: {sorted(unknown_data)}")
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        def resolve(p):
            return None if p is None else str((base / p).resolve())
        known = {f.name for f in dataclasses.fields(cls)} - {"data", "schema", "adjacency"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown configuration keys: {sorted(unknown)}")
        if "model" not in d:
            raise ValidationError("configuration needs a model")
        cfg = cls(data=resolve(data["path"]), schema=dict(data.get("schema") or {}),
                  adjacency=resolve(data.get("adjacency")), **d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.model not in MODELS:
            raise ValidationError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.frailty not in FRAILTIES:
            raise ValidationError(f"unknown frailty {self.frailty!r}; choose from {FRAILTIES}")
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        self.alpha = _as_float(self.alpha, "alpha")
        self.nu = float(_as_float(self.nu, "nu"))
        coords = list(self.schema.get("coords") or [])
        if self.frailty == "car" and not self.adjacency:
            raise ValidationError("frailty=car requires data.adjacency")
        if self.frailty == "grf" and not coords:
            raise ValidationError("frailty=grf requires coordinate columns (schema.coords)")
        if self.model in COPULA_MODELS:
            if self.frailty != "none":
                raise ValidationError("copula and independent PH/LDDPM models take no frailty")
            if self.model.startswith("copula") and not coords:
                raise ValidationError(f"{self.model} requires coordinate columns (schema.coords)")
            if self.fix_alpha:
                raise ValidationError("fix_alpha applies to survreg and gaft models only")
        if self.selection and self.model not in SURVREG_MODELS:
            raise ValidationError("selection is available for survreg models only")
        ChainConfig(**self.mcmc)
        self.priors()

    def chain_config(self, seed_offset: int = 0) -> ChainConfig:
        cc = ChainConfig(**self.mcmc)
        return dataclasses.replace(cc, seed=cc.seed + seed_offset)

    def priors(self):
        """Prior dataclass of the model with the configured overrides applied."""
        if self.model in SURVREG_MODELS:
            cls = SurvregPriors
        elif self.model == "gaft":
            cls = GaftPriors
        else:
            cls = CopulaPriors
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(self.prior) - names
        if unknown:
            raise ValidationError(f"unknown prior keys for {self.model}: {sorted(unknown)}")
        kw = {}
        for k, v in self.prior.items():
            if isinstance(v, list):
                v = np.asarray(v, dtype=float)
            elif isinstance(v, str):
                v = _as_float(v, f"prior.{k}")
            kw[k] = v
        pr = cls(**kw)
        if self.fix_alpha:
            pr.a0 = -1.0
        return pr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"] = {"path": d.pop("data"), "schema": d.pop("schema"),
                     "adjacency": d.pop("adjacency")}
        if d["alpha"] is not None and np.isinf(d["alpha"]):
            d["alpha"] = "inf"
        return d


def parse_override(item: str):
    """``a.b=value`` with ``value`` parsed as YAML."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse override value {raw!r}: {exc}") from None
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides) -> dict:
    d = copy.deepcopy(d)
    for item in overrides or []:
        keys, value = parse_override(item)
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {item!r} descends into a non-mapping")
        node[keys[-1]] = value
    return d


def read_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from None
    return d or {}


def load_config(path, overrides=None) -> FitConfig:
    d = apply_overrides(read_yaml(path), overrides)
    return FitConfig.from_dict(d, base_dir=Path(path).resolve().parent)


def load_data(cfg: FitConfig):
    if not os.path.exists(cfg.data):
        raise ValidationError(f"no such data file: {cfg.data}")
    ds = load_dataset(cfg.data, cfg.schema, adjacency=cfg.adjacency)
    return standardize_covariates(ds, cfg.scale_covariates)


def prevalidate(cfg: FitConfig, ds):
    """Data checks that must pass before any sampling starts."""
    if cfg.model in COPULA_MODELS:
        _validate_copula_data(ds, cfg.model.startswith("copula"))
    elif cfg.frailty != "none":
        _validate_frailty(ds, cfg.frailty)
    if cfg.model == "gaft" and cfg.selection:
        raise ValidationError("selection is available for survreg models only")
    if cfg.selection:
        if ds.p == 0:
            raise ValidationError("selection needs at least one covariate")
        if np.max(np.abs(ds.X.mean(axis=0))) > 1e-8:
            raise ValidationError("selection needs centered covariates; set scale_covariates")


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------

def _survreg_spec(cfg: FitConfig, ds) -> ModelSpec:
    pr = cfg.priors()
    link = cfg.model.split("-")[1].upper()
    alpha = cfg.alpha
    if alpha is None:
        alpha = np.inf if cfg.fix_alpha else 1.0
    fam = CenteringFamily(cfg.family, (0.0, 0.0))
    frailty = None
    if cfg.frailty != "none":
        frailty = FrailtyState(cfg.frailty, np.zeros(ds.m), 1.0, nu=cfg.nu)
    return ModelSpec(link, TbpState.uniform(pr.L, fam, alpha), np.zeros(ds.p), frailty,
                     priors=pr)


def run_model(cfg: FitConfig, ds, seed_offset: int = 0) -> PosteriorChain:
    """Sample one chain of the configured model."""
    config = cfg.chain_config(seed_offset)
    if cfg.model in SURVREG_MODELS:
        return run_chain(ds, _survreg_spec(cfg, ds), config, selection=cfg.selection)
    if cfg.model == "gaft":
        frailty = None if cfg.frailty == "none" else cfg.frailty
        return run_gaft(ds, config, cfg.priors(), frailty=frailty,
                        alpha=1.0 if cfg.alpha is None else cfg.alpha, nu=cfg.nu)
    return run_copula(ds, config, cfg.model, cfg.priors())


def _worker(args):
    cfg, ds, k = args
    return run_model(cfg, ds, k)


def run_chains(cfg: FitConfig, ds, nchains: int = 1) -> list[PosteriorChain]:
    """Independent chains with seeds ``seed, seed + 1, ...``."""
    if nchains < 1:
        raise ValidationError("--chains must be at least 1")
    if nchains == 1:
        return [run_model(cfg, ds, 0)]
    workers = min(nchains, os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_worker, [(cfg, ds, k) for k in range(nchains)]))


def merge_chains(chains: list[PosteriorChain]) -> PosteriorChain:
    """Stack draws of several chains (for summaries only)."""
    if len(chains) == 1:
        return chains[0]
    draws = {k: np.concatenate([c[k] for c in chains]) for k in chains[0].draws}
    acc = {k: float(np.mean([c.acceptance[k] for c in chains])) for k in chains[0].acceptance}
    return PosteriorChain(draws, np.concatenate([c.loglik for c in chains]), acc,
                          dict(chains[0].meta))


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------

def coefficient_draws(chain: PosteriorChain, ds) -> tuple[list[str], np.ndarray]:
    """Regression-coefficient draws on the original covariate scale."""
    model = chain.meta["model"]
    names = list(chain.meta["covariate_names"])
    if model.startswith("survreg"):
        beta = chain["beta"] * chain["gamma"] if "gamma" in chain else chain["beta"]
        return names, ds.unscale_coefficients(beta)
    if model == "gaft" or model.endswith("ddp"):
        if model == "gaft":
            b = chain["beta"]
        else:
            b = np.einsum("sk,skj->sj", chain["w"], chain["beta"])
        icpt, slopes = ds.unscale_coefficients(b[:, 1:], intercept=b[:, 0])
        return ["(Intercept)"] + names, np.column_stack([icpt, slopes])
    return names, ds.unscale_coefficients(chain["beta"])


def _table(title, names, draws) -> list[str]:
    if draws.ndim == 1:
        draws = draws[:, None]
    if draws.shape[1] == 0:
        return []
    s = posterior_summary(draws)
    width = max(12, max(len(n) for n in names) + 2)
    lines = [title, f"{'':<{width}}{'Mean':>12}{'Median':>12}{'Std.Dev':>12}"
                    f"{'95%CI-Low':>12}{'95%CI-Upp':>12}"]
    for j, name in enumerate(names):
        vals = [s[k][j] for k in ("mean", "median", "sd", "lower", "upper")]
        lines.append(f"{name:<{width}}" + "".join(f"{v:>12.5g}" for v in vals))
    return lines + [""]


def plugin_loglik(chain: PosteriorChain, ds) -> float:
    """Log-likelihood at the DIC plug-in point of the chain's model."""
    model = chain.meta["model"]
    if model.startswith("survreg"):
        return log_likelihood(ds, spec_from_draw(chain, mean=True))[0]
    if model == "gaft":
        state, v = gaft_state_from_draw(chain, mean=True)
        return gaft_log_likelihood(ds, state, v)[0]
    delta = ds.a == ds.b
    if model.endswith("coxph"):
        cut = np.concatenate([[0.0], chain.meta["cutpoints"], [np.inf]])
        bl = PiecewiseExpBaseline(cut, chain["h"].mean(0))
        lS, _, lf = pe_log(bl, ds.X @ chain["beta"].mean(0), ds.a)
        return float(np.where(delta, lf, lS).sum())
    # DDP: log of the posterior mean of each observation's likelihood term.
    return float(np.sum(np.log(np.mean(np.exp(chain.loglik), axis=0))))


def _dic_kind(model):
    if model.startswith("survreg"):
        return "survreg"
    if model == "gaft":
        return "gaft"
    return "coxph" if model.endswith("coxph") else "ddp"


def build_summary(chain: PosteriorChain, ds, cfg: FitConfig, nchains: int = 1) -> str:
    """Plain-text posterior summary (deterministic for fixed draws)."""
    meta = chain.meta
    model = meta["model"]
    out = [f"Model: {model}", f"Frailty: {cfg.frailty}"]
    if model.startswith("survreg"):
        mode = "parametric" if meta["parametric"] else f"TBP (L={meta['L']})"
        out.append(f"Baseline: {meta['family']} centering, {mode}")
    out += [f"Observations: {ds.n}   Chains: {nchains}   Saved draws: {chain.nsave}",
            "Coefficients are on the original covariate scale.", ""]

    names, coef = coefficient_draws(chain, ds)
    out += _table("Posterior inference of regression coefficients", names, coef)

    if model.startswith("survreg"):
        out += _table("Posterior inference of baseline parameters (covariates at their means)",
                      ["theta1", "theta2"], chain["theta"])
        if "alpha" in chain and not meta["fix_alpha"]:
            out += _table("Posterior inference of precision parameter", ["alpha"], chain["alpha"])
    elif model == "gaft":
        out += _table("Posterior inference of error scale", ["sigma2"], chain["sigma2"])
        if not meta["fix_alpha"]:
            out += _table("Posterior inference of precision parameter", ["alpha"],
                          chain["alpha"])
    elif model.endswith("coxph"):
        out += _table("Posterior inference of baseline hazards (covariates at their means)",
                      [f"h{k + 1}" for k in range(chain["h"].shape[1])], chain["h"])
    else:
        out += _table("Posterior inference of DP precision", ["alpha"], chain["alpha"])
    if "theta1" in chain:
        out += _table("Posterior inference of copula parameters", ["theta1", "theta2"],
                      np.column_stack([chain["theta1"], chain["theta2"]]))
    if "tau2" in chain:
        label = {"car": "conditional CAR", "iid": "IID", "grf": "GRF"}[cfg.frailty]
        out += _table(f"Posterior inference of {label} frailty variance", ["tau2"], chain["tau2"])
    if "phi" in chain:
        out += _table("Posterior inference of GRF range", ["phi"], chain["phi"])

    out.append("Acceptance rates")
    for k in sorted(chain.acceptance):
        out.append(f"  {k:<16}{chain.acceptance[k]:.4f}")
    out.append("")

    LPML, _, unstable = lpml(chain.loglik)
    D, pD = dic(chain.loglik, plugin_loglik(chain, ds))
    W, pW = waic(chain.loglik)
    out += ["Model comparison",
            f"  Log pseudo marginal likelihood: LPML={LPML:.3f}"
            + (f"  ({int(unstable.sum())} unstable CPO)" if unstable.any() else ""),
            f"  Deviance Information Criterion: DIC={D:.3f}  pD={pD:.3f}",
            f"  Watanabe-Akaike information criterion: WAIC={W:.3f}  pWAIC={pW:.3f}",
            f"  DIC plug-in: {DIC_PLUGIN_NOTE[_dic_kind(model)]}", ""]

    bfs = bayes_factors(chain, ds)
    if bfs:
        out.append("Bayes factors")
        for k, v in bfs.items():
            out.append(f"  {k:<24}{v:.5g}")
        out.append("")

    if "gamma" in chain and model.startswith("survreg"):
        out.append("Visited models (selection frequencies)")
        for k, f in model_frequencies(chain["gamma"], names):
            out.append(f"  {k:<40}{f:.4f}")
        out.append("")
    return "\n".join(out)


def bayes_factors(chain: PosteriorChain, ds) -> dict:
    meta = chain.meta
    model = meta["model"]
    if model.startswith("survreg") and "z" in chain and not meta["fix_alpha"]:
        return {"TBP vs parametric": savage_dickey_bf(chain["z"], chain["alpha"])}
    if model == "gaft" and meta["L"] >= 2:
        return {f"LDTFP {k}": v for k, v in gaft_bayes_factors(
            chain["gamma"], float(chain["alpha"].mean()), np.asarray(meta["ZtZ"]), meta["n"],
            meta["L"], meta["baseline_names"]).items()}
    return {}


# --------------------------------------------------------------------------
# Run directories
# --------------------------------------------------------------------------

def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _config_hash(cfg: FitConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _g(x) -> str:
    return repr(float(x))


def load_run(run_dir):
    run = Path(run_dir)
    if not (run / CONFIG_NAME).exists():
        raise ValidationError(f"{run} is not a run directory (no {CONFIG_NAME})")
    cfg = FitConfig.from_dict(read_yaml(run / CONFIG_NAME), base_dir=run)
    files = sorted((run / CHAINS_DIR).glob("chain*.npz"))
    if not files:
        raise ValidationError(f"{run} has no saved chains")
    chains = [PosteriorChain.load(f) for f in files]
    return cfg, chains


def write_diagnostics(run: Path, chain: PosteriorChain, ds):
    diag = run / DIAG_DIR
    diag.mkdir(exist_ok=True)
    _write_csv(diag / "acceptance.csv", ["block", "rate"],
               [[k, _g(v)] for k, v in sorted(chain.acceptance.items())])
    _, cpo, unstable = lpml(chain.loglik)
    _write_csv(diag / "cpo.csv", ["obs", "subject", "cpo", "unstable"],
               [[i, ds.subject[i], _g(c), int(u)] for i, (c, u) in enumerate(zip(cpo, unstable))])
    if "v" in chain:
        write_frailties(diag / "frailty.csv", chain, ds)
    if "gamma" in chain and chain.meta["model"].startswith("survreg"):
        _write_csv(diag / "selection.csv", ["model", "frequency"],
                   [[k, _g(f)] for k, f in model_frequencies(chain["gamma"],
                                                             chain.meta["covariate_names"])])


def write_frailties(path, chain: PosteriorChain, ds):
    v = chain["v"]
    labels = ds.unit_labels or [str(k) for k in range(v.shape[1])]
    s = posterior_summary(v)
    _write_csv(path, ["unit", "mean", "median", "sd", "lower", "upper"],
               [[labels[k]] + [_g(s[q][k]) for q in ("mean", "median", "sd", "lower", "upper")]
                for k in range(v.shape[1])])


def _versions() -> dict:
    return {"spsurv": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pyyaml": yaml.__version__, "python": platform.python_version()}


def fit(cfg: FitConfig, out_dir, nchains: int = 1) -> Path:
    """Run the configured fit and populate ``out_dir``."""
    ds = load_data(cfg)
    prevalidate(cfg, ds)
    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / CHAINS_DIR).mkdir(exist_ok=True)
    (run / LOG_DIR).mkdir(exist_ok=True)
    handler = logging.FileHandler(run / LOG_DIR / "fit.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        with open(run / CONFIG_NAME, "w", encoding="utf-8") as fh:
            yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
        log.info("fitting %s on %d observations with %d chain(s)", cfg.model, ds.n, nchains)
        chains = run_chains(cfg, ds, nchains)
        for k, c in enumerate(chains):
            c.save(run / CHAINS_DIR / f"chain{k}.npz")
        chain = merge_chains(chains)
        (run / SUMMARY_NAME).write_text(build_summary(chain, ds, cfg, nchains) + "\n",
                                        encoding="utf-8")
        write_diagnostics(run, chain, ds)
        manifest = {"seed": cfg.chain_config().seed, "chains": nchains,
                    "chain_seeds": [cfg.chain_config(k).seed for k in range(nchains)],
                    "config_hash": _config_hash(cfg), "data_sha256": _sha256_file(cfg.data),
                    "versions": _versions(), "model": cfg.model}
        with open(run / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        log.info("wrote %s", run)
    finally:
        log.removeHandler(handler)
        handler.close()
    return run


def summarize(run_dir) -> str:
    cfg, chains = load_run(run_dir)
    ds = load_data(cfg)
    return build_summary(merge_chains(chains), ds, cfg, len(chains))


# --------------------------------------------------------------------------
# Prediction and residuals
# --------------------------------------------------------------------------

def read_profiles(path, names, baseline_names=()):
    """Covariate profiles from a delimited file; returns ``(labels, X, Z)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in reader.fieldnames or []]
        reader.fieldnames = header
        rows = list(reader)
    expected = list(names) + list(baseline_names)
    missing = [c for c in expected if c not in header]
    if missing:
        raise ValidationError(f"new covariates do not match the fit: missing {missing}; "
                              f"expected columns {expected}")
    try:
        X = np.array([[float(r[c]) for c in names] for r in rows]).reshape(len(rows), len(names))
        Z = np.array([[float(r[c]) for c in baseline_names] for r in rows]).reshape(
            len(rows), len(baseline_names))
    except ValueError as exc:
        raise ValidationError(f"non-numeric covariate value: {exc}") from None
    labels = [r.get("profile", str(i)) for i, r in enumerate(rows)]
    return labels, X, Z


def survival_draws(chain: PosteriorChain, ds, x_orig, z_orig, t) -> np.ndarray:
    """Draws x grid of the population survival curve (frailty 0) for one profile."""
    model = chain.meta["model"]
    x = ds.scale_new(x_orig)[0] if ds.p else np.zeros(0)
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValidationError("prediction grid must be positive")
    rows = []
    if model.startswith("survreg"):
        for s in range(chain.nsave):
            spec = spec_from_draw(chain, s)
            eta = float(linear_predictor(x[None, :], spec.beta, spec.gamma)[0]) if ds.p else 0.0
            fam = spec.baseline.family
            rows.append(np.exp(link_log(spec.link, spec.w, fam.tag, fam.theta, eta, t)[0]))
        return np.array(rows)
    if model == "gaft":
        z = ds.scale_new_baseline(z_orig)[0] if ds.Z is not None else np.zeros(0)
        for s in range(chain.nsave):
            state, _ = gaft_state_from_draw(chain, s)
            rows.append(gaft_survival(state, x, z, t))
        return np.array(rows)
    return copula_survival(chain, x, t)


def predict(run_dir, newdata, grid) -> list[list]:
    """Rows ``(profile, t, mean, lower, upper)`` of posterior survival curves."""
    cfg, chains = load_run(run_dir)
    ds = load_data(cfg)
    chain = merge_chains(chains)
    base_names = ds.baseline_names if chain.meta["model"] == "gaft" else []
    labels, X, Z = read_profiles(newdata, ds.covariate_names, base_names)
    grid = np.asarray(grid, dtype=float)
    out = []
    for i, lab in enumerate(labels):
        S = survival_draws(chain, ds, X[i:i + 1], Z[i:i + 1], grid)
        lo, hi = np.quantile(S, [0.025, 0.975], axis=0)
        for j, t in enumerate(grid):
            out.append([lab, _g(t), _g(S[:, j].mean()), _g(lo[j]), _g(hi[j])])
    return out


def residual_samples(chain: PosteriorChain, ds, ncurves: int = 10, seed: int = 0):
    """Cox-Snell residual intervals for ``ncurves`` random saved draws."""
    rng = np.random.default_rng(seed)
    model = chain.meta["model"]
    draws = np.sort(rng.choice(chain.nsave, size=min(ncurves, chain.nsave), replace=False))
    idx2 = np.concatenate([np.arange(ds.n), np.arange(ds.n)])
    out = []
    for s in draws:
        s = int(s)
        if model.startswith("survreg"):
            spec = spec_from_draw(chain, s)
            v = spec.frailty.v if spec.frailty is not None else None
            eta = linear_predictor(ds.X, spec.beta, spec.gamma, v, ds.unit)[idx2]
            fam = spec.baseline.family

            def logS(t, eta=eta, spec=spec, fam=fam):
                return link_log(spec.link, spec.w, fam.tag, fam.theta, eta, t)[0]
        elif model == "gaft":
            state, v = gaft_state_from_draw(chain, s)

            def logS(t, state=state, v=v):
                return gaft_log_survival(ds, state, t, idx2, v)
        elif model.endswith("coxph"):
            cut = np.concatenate([[0.0], chain.meta["cutpoints"], [np.inf]])
            bl = PiecewiseExpBaseline(cut, chain["h"][s])
            eta = (ds.X @ chain["beta"][s])[idx2]

            def logS(t, bl=bl, eta=eta):
                return pe_log(bl, eta, t)[0]
        else:
            st = DdpState(_sticks_from_w(chain["w"][s]), chain["beta"][s], chain["sigma2"][s])
            Xd = np.column_stack([np.ones(ds.n), ds.X])[idx2]

            def logS(t, st=st, Xd=Xd):
                return lddpm_log(st, Xd, t)[0]

        def safe(t, f=logS):
            # S(0) = 1; infinite right ends are set to infinity by residual_intervals.
            t = np.asarray(t, dtype=float)
            ok = np.isfinite(t) & (t > 0)
            return np.where(ok, f(np.where(ok, t, 1.0)), 0.0)
        r = residual_intervals(safe, ds.a, ds.b)
        r.draw = s
        out.append(r)
    return out


def residuals(run_dir, ncurves: int = 10, seed: int = 0):
    cfg, chains = load_run(run_dir)
    ds = load_data(cfg)
    chain = merge_chains(chains)
    samples = residual_samples(chain, ds, ncurves, seed)
    diag = Path(run_dir) / DIAG_DIR
    diag.mkdir(exist_ok=True)
    rows = []
    for c, r in enumerate(samples):
        rows += [[c, r.draw, i, _g(a), _g(b)] for i, (a, b) in enumerate(zip(r.ra, r.rb))]
    _write_csv(diag / "coxsnell.csv", ["curve", "draw", "obs", "r_left", "r_right"], rows)
    slopes = coxsnell_slopes(samples)
    _write_csv(diag / "coxsnell_slopes.csv", ["curve", "draw", "slope"],
               [[c, r.draw, _g(sl)] for c, (r, sl) in enumerate(zip(samples, slopes))])
    if "v" in chain:
        write_frailties(diag / "frailty.csv", chain, ds)
    return slopes


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

def simulate(gen: dict, out_dir) -> Path:
    """Write ``data.csv``, ``truth.json``, ``fit.yaml`` (and ``adjacency.csv``)."""
    gen = dict(gen)
    model = gen.pop("model", "survreg-ph")
    seed = int(gen.pop("seed", 0))
    n = int(gen.pop("n", 500))
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if model in SURVREG_MODELS:
            link = model.split("-")[1].upper()
            family = gen.pop("family", "weibull")
            theta = gen.pop("theta", [0.0, 0.0])
            beta = gen.pop("beta", [1.0, -0.5])
            ds, truth = simulate_survreg(n, link, family, theta, beta, rng, **gen)
        elif model == "copula":
            beta = gen.pop("beta", [1.0, -0.5])
            theta1 = gen.pop("theta1", 0.5)
            theta2 = gen.pop("theta2", 5.0)
            ds, truth = simulate_copula(n, beta, theta1, theta2, rng, **gen)
        else:
            raise ValidationError(f"simulate supports {SURVREG_MODELS + ('copula',)}")
    except TypeError as exc:
        raise ValidationError(f"bad generator option: {exc}") from None
    truth["seed"] = seed
    truth["n"] = n
    schema = write_dataset(ds, out / "data.csv")
    data = {"path": "data.csv", "schema": dataclasses.asdict(schema)}
    data["schema"]["event_codes"] = list(data["schema"]["event_codes"])
    frailty = truth.get("frailty", "none")
    if ds.structure.kind == "areal":
        labels = ds.unit_labels or [str(k) for k in range(ds.m)]
        write_adjacency(labels, ds.structure.adjacency, out / "adjacency.csv")
        data["adjacency"] = "adjacency.csv"
    if ds.structure.kind != "geo":
        data["schema"]["coords"] = []
    if frailty in ("none", None) and model != "copula":
        data["schema"]["unit"] = None
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
    fit_model = model if model != "copula" else "copula-coxph"
    with open(out / "fit.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump({"model": fit_model, "frailty": frailty if model != "copula" else "none",
                        "data": data, "mcmc": {"nburn": 1000, "nsave": 1000, "nskip": 1,
                                               "ndisplay": 500, "seed": 0}},
                       fh, sort_keys=True)
    return out


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _parse_grid(text):
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ValidationError(f"cannot parse grid {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spsurv", description="Bayesian spatial survival models.")
    p.add_argument("--version", action="version", version=f"spsurv {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model described by a YAML file")
    f.add_argument("config")
    f.add_argument("-o", "--out", required=True, help="run directory")
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration entry (dotted key)")
    f.add_argument("--chains", type=int, default=1)

    pr = sub.add_parser("predict", help="posterior survival curves for new profiles")
    pr.add_argument("run")
    pr.add_argument("--newdata", required=True, help="CSV with one row per profile")
    g = pr.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="comma-separated time points")
    g.add_argument("--grid-file", help="file with one time point per line")
    pr.add_argument("-o", "--out", help="output CSV (default: stdout)")

    r = sub.add_parser("residuals", help="Cox-Snell residuals and frailty export")
    r.add_argument("run")
    r.add_argument("--ncurves", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="write a synthetic dataset")
    s.add_argument("config", help="YAML generator description")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    m = sub.add_parser("summarize", help="print the posterior summary of a run")
    m.add_argument("run")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"spsurv: error: {exc}", file=sys.stderr)
        return 1
    stream = None
    if not args.quiet:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("spsurv: %(message)s"))
        log.addHandler(stream)
    log.setLevel(logging.INFO)
    try:
        if args.command == "fit":
            cfg = load_config(args.config, args.set)
            run = fit(cfg, args.out, args.chains)
            print((run / SUMMARY_NAME).read_text(encoding="utf-8"), end="")
        elif args.command == "predict":
            if args.grid is not None:
                grid = _parse_grid(args.grid)
            else:
                grid = _parse_grid(",".join(Path(args.grid_file).read_text().split()))
            rows = predict(args.run, args.newdata, grid)
            buf = io.StringIO()
            w = csv.writer(buf)
            w.writerow(["profile", "t", "mean", "lower", "upper"])
            w.writerows(rows)
            if args.out:
                Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
            else:
                sys.stdout.write(buf.getvalue())
        elif args.command == "residuals":
            slopes = residuals(args.run, args.ncurves, args.seed)
            print(f"Cox-Snell integrated-hazard slopes: mean {slopes.mean():.4f}, "
                  f"range [{slopes.min():.4f}, {slopes.max():.4f}]")
        elif args.command == "simulate":
            gen = apply_overrides(read_yaml(args.config), args.set)
            out = simulate(gen, args.out)
            print(f"wrote {out / 'data.csv'}")
        elif args.command == "summarize":
            print(summarize(args.run))
    except NumericalError as exc:
        print(f"spsurv: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError) as exc:
        print(f"spsurv: error: {exc}", file=sys.stderr)
        return 1
    except SpsurvError as exc:
        print(f"spsurv: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if stream is not None:
            log.removeHandler(stream)
    return 0


if __name__ == "__main__":
    sys.exit(main())
