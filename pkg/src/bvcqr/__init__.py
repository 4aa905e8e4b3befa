"""Bayesian varying-coefficient quantile regression for exposure mixtures."""

from .design import QuantizedDesign, build_design, mixture_mean
from .errors import BVCQRError, ConfigError, DataError, NumericalError
from .model import BVCQRModel, Hyperparameters, ModelOptions, ParameterState
from .pipeline import FitConfig, FitResult, fit_panel
from .posterior import evaluate_h, global_trend, summarize_effects
from .preprocess import ExposurePanel, QuantizedExposures, quantize
from .sampler import PosteriorDraws, SamplerConfig, sample
from .simulate import GroundTruth, Scenario, builtin_scenario, generate

__all__ = [
    "BVCQRError",
    "BVCQRModel",
    "ConfigError",
    "DataError",
    "ExposurePanel",
    "FitConfig",
    "FitResult",
    "GroundTruth",
    "Hyperparameters",
    "ModelOptions",
    "NumericalError",
    "ParameterState",
    "PosteriorDraws",
    "QuantizedDesign",
    "QuantizedExposures",
    "SamplerConfig",
    "Scenario",
    "build_design",
    "builtin_scenario",
    "evaluate_h",
    "fit_panel",
    "generate",
    "global_trend",
    "mixture_mean",
    "quantize",
    "sample",
    "summarize_effects",
]
