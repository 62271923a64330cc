"""Radio dynamic zone simulator: shadowing fields, Kriging REMs, leakage, TDOA and compliance."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .geometry import EvalGrid, SourceSet, ZoneLayout, build_sensor_ring, validate_sources
from .kriging import OrdinaryKrigingREM, PathLossBaseline, fit_mle, fit_moments, krige, rmse
from .propagation import PowerField, ShadowingModel, ShadowingSampler, sample_field

__all__ = [
    "EvalGrid",
    "ExperimentConfig",
    "OrdinaryKrigingREM",
    "PathLossBaseline",
    "PowerField",
    "ShadowingModel",
    "ShadowingSampler",
    "SourceSet",
    "ZoneLayout",
    "build_sensor_ring",
    "fit_mle",
    "fit_moments",
    "krige",
    "load_config",
    "rmse",
    "sample_field",
    "validate_sources",
]
