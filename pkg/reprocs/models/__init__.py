"""
Pydantic models for reprocs configs and reports
"""

from .schemas import (
    EngineParams, ExperimentConfig, L1SolveOptions,
    SignalModelConfig, SupportModelConfig, OutlierConfig,
    AssumptionCheck, AssumptionReport, MetricsFrame, TrialSummary, EnsembleSummary
)
