"""Bayesian feedback between geostatistical and preferential-sampling models."""

from .errors import BayesFeedError
from .mesh import assemble_fem, build_regular_mesh
from .priors import PriorSet, base_priors
from .simulate import sample_independent, sample_preferential, simulate_truth

__all__ = [
    "BayesFeedError",
    "PriorSet",
    "assemble_fem",
    "base_priors",
    "build_regular_mesh",
    "sample_independent",
    "sample_preferential",
    "simulate_truth",
]

__version__ = "0.1.0"
