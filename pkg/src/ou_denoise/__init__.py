"""Parameter estimation for Ornstein-Uhlenbeck signals under thermal and multiplicative noise."""

from .em import EMConfig, FitResult
from .em import fit as fit_em
from .mcmc import ModelSpec, PosteriorFit, PriorBox, fit_known_ratio
from .mcmc import fit as fit_mcmc
from .model import NoiseParams, OUParams, TimeSeries, add_noise, load_series, simulate_latent
from .nuts import SamplerConfig

__version__ = "0.1.0"

__all__ = [
    "EMConfig",
    "FitResult",
    "ModelSpec",
    "NoiseParams",
    "OUParams",
    "PosteriorFit",
    "PriorBox",
    "SamplerConfig",
    "TimeSeries",
    "add_noise",
    "fit_em",
    "fit_known_ratio",
    "fit_mcmc",
    "load_series",
    "simulate_latent",
]
