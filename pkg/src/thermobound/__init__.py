"""Thermodynamic lower bounds on diffusion-model likelihoods, at desk scale."""

from .data import DatasetSpec, data_entropy, standard_gaussian, uniform_unit
from .entropy import (
    CONTROLLED,
    DIVERGENCE,
    FORWARD,
    NORM,
    DemonLedger,
    EntropyRateSeries,
    controlled_series,
    demon_ledger,
    exchange_rate,
    forward_series,
    intrinsic_rate,
    system_rate,
)
from .kernels import BACKEND as KERNEL_BACKEND
from .likelihood import (
    BoundReport,
    ODEConfig,
    bound_and_gap,
    entropy_S0,
    entropy_S1,
    integral_I_diff,
    integral_I_theta,
    marginal_entropy,
    nll_ode,
    pf_ode_log_likelihood,
    true_score_identity,
)
from .process import DiffusionProcess
from .quadrature import TimeGrid
from .sampler import TrajectoryEnsemble, controlled_forward_ensemble, reverse_sample
from .scorefield import (
    ExactGaussian,
    ExactUniform,
    FeedForwardScore,
    LinearScore,
    PerturbationSpec,
    PerturbedScore,
    ScoreField,
    divergence,
    evaluate,
    exact_field,
)
from .training import TrainConfig, TrainReport, dsm_loss, train

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "CONTROLLED", "DIVERGENCE", "DatasetSpec", "DemonLedger", "DiffusionProcess",
    "EntropyRateSeries", "ExactGaussian", "ExactUniform", "FORWARD", "FeedForwardScore", "KERNEL_BACKEND",
    "LinearScore", "NORM", "ODEConfig", "PerturbationSpec", "PerturbedScore", "ScoreField", "TimeGrid",
    "TrainConfig", "TrainReport", "TrajectoryEnsemble", "bound_and_gap", "controlled_forward_ensemble",
    "controlled_series", "data_entropy", "demon_ledger", "divergence", "dsm_loss", "entropy_S0", "entropy_S1",
    "evaluate", "exact_field", "exchange_rate", "forward_series", "integral_I_diff", "integral_I_theta",
    "intrinsic_rate", "marginal_entropy", "nll_ode", "pf_ode_log_likelihood", "reverse_sample",
    "standard_gaussian", "system_rate", "train", "true_score_identity", "uniform_unit",
]
