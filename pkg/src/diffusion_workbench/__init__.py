"""Calibration and forecasting of innovation-diffusion curves under exogenous shocks."""

from .model import (
    DiffusionModel,
    DiffusionParams,
    DomainError,
    InadmissibleModelError,
    ShockTerm,
    Trajectory,
    cumulative,
    trajectory,
)
from .series import AdoptionSeries, SeriesError, InputFormatError, Target, TargetsTable, ingest_series, read_targets
from .calibrate import FitConfig, FitResult, nls_fit, stepwise_fit, smpcc
from .analyze import (
    AnalysisReport,
    ShockSummary,
    analyze_fit,
    cluster_countries,
    detect_peak,
    forecast,
    market_potential_diagnostic,
    summarize_shocks,
    time_to_quantile,
)
from .synthgen import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "AdoptionSeries",
    "AnalysisReport",
    "DiffusionModel",
    "DiffusionParams",
    "DomainError",
    "FitConfig",
    "FitResult",
    "InadmissibleModelError",
    "InputFormatError",
    "SeriesError",
    "ShockSummary",
    "ShockTerm",
    "SynthSpec",
    "Target",
    "TargetsTable",
    "Trajectory",
    "analyze_fit",
    "cluster_countries",
    "cumulative",
    "detect_peak",
    "forecast",
    "generate",
    "ingest_series",
    "market_potential_diagnostic",
    "nls_fit",
    "read_targets",
    "smpcc",
    "stepwise_fit",
    "summarize_shocks",
    "time_to_quantile",
    "trajectory",
]
