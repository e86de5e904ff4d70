"""Bayesian semiparametric survival models for spatially referenced data.

The package fits AFT, PH and PO models with a transformed Bernstein
polynomial baseline and optional frailties, generalized AFT models with a
linear dependent tailfree process error, and Gaussian-copula models for
georeferenced data.
"""
__version__ = "0.1.0"

from .baseline import CenteringFamily, TbpState
from .copula import CopulaPriors, run_copula
from .errors import NumericalError, SpsurvError, ValidationError
from .gaft import GaftPriors, run_gaft
from .mcmc import ChainConfig, PosteriorChain, run_chain
from .modelcheck import cox_snell, dic, lpml, savage_dickey_bf, turnbull_npmle, waic
from .semimodels import ModelSpec, SurvregPriors
from .survdata import Schema, SurvDataset, load_dataset, standardize_covariates

__all__ = [
    "CenteringFamily", "ChainConfig", "CopulaPriors", "GaftPriors", "ModelSpec",
    "NumericalError", "PosteriorChain", "Schema", "SpsurvError", "SurvDataset",
    "SurvregPriors", "TbpState", "ValidationError", "__version__", "cox_snell", "dic",
    "load_dataset", "lpml", "run_chain", "run_copula", "run_gaft", "savage_dickey_bf",
    "standardize_covariates", "turnbull_npmle", "waic",
]
