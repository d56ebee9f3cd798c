"""Deep-equilibrium k-space reconstruction with learned annihilating filters.

The main entry points are re-exported here; see the submodules for the rest.
"""

from kdeq.deq import Problem, gradient_check, param_gradient
from kdeq.fixed_point import FixedPointConfig, FixedPointReport, SamplingMask, project_dc
from kdeq.fixed_point import solve_fixed_point
from kdeq.grid import MetricsTriple, coil_combine_rss, fft_centered, ifft_centered, metrics
from kdeq.hankel import FilterBank, SpecNormConfig, apply_filterbank, calibrate_filters
from kdeq.hankel import hankel_lift, spectral_normalize
from kdeq.networks import NetworkParams, init_generalized, init_sspgd, lipschitz_normalize
from kdeq.networks import residual, residual_vjp
from kdeq.train import TrainConfig, make_pair, reconstruct, train

__version__ = "0.1.0"

__all__ = [
    "FilterBank",
    "FixedPointConfig",
    "FixedPointReport",
    "MetricsTriple",
    "NetworkParams",
    "Problem",
    "SamplingMask",
    "SpecNormConfig",
    "TrainConfig",
    "apply_filterbank",
    "calibrate_filters",
    "coil_combine_rss",
    "fft_centered",
    "gradient_check",
    "hankel_lift",
    "ifft_centered",
    "init_generalized",
    "init_sspgd",
    "lipschitz_normalize",
    "make_pair",
    "metrics",
    "param_gradient",
    "project_dc",
    "reconstruct",
    "residual",
    "residual_vjp",
    "solve_fixed_point",
    "spectral_normalize",
    "train",
]
