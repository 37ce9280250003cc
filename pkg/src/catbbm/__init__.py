"""Branching Brownian motion with homogeneous and catalytic branching at the origin."""
from .params import (
    DerivedRates,
    ModelParams,
    OffspringDistribution,
    Regime,
    delta_lambda,
    derive_rates,
    optimal_split,
    split_exponent,
    xlogx_holds,
)
from .rng import RandomStream

__version__ = "0.1.0"
