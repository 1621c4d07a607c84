"""Monotone treed distributed lag nonlinear models.

Exposure-lag-response surfaces are built from an ensemble of nested trees:
each tree partitions the lag axis, and every lag block owns a second tree
that partitions exposure values into ordered bins with nonnegative
increments, so each fitted exposure-response curve is nondecreasing.
"""

from .core import (
    ConfigError, LaggedDataset, ModelConfig, ModelError, build_lagged_design,
)
from .kernels import BACKEND
from .mcmc import Chain, ChainResult, PosteriorDraw, run_chain, run_chains
from .inference import gelman_rubin, summarize_surface, susceptibility

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Chain", "ChainResult", "ConfigError", "LaggedDataset", "ModelConfig",
    "ModelError", "PosteriorDraw", "build_lagged_design", "gelman_rubin", "run_chain",
    "run_chains", "summarize_surface", "susceptibility", "__version__",
]
