"""Introspective conformal planning: rationale-grounded candidate plans with
calibrated prediction sets that tell a robot when to ask for help."""
from introplan.conformal import (
    CalibrationResult,
    InfeasibleTargetError,
    TemplateVersionMismatch,
    calibrate,
    choose_epsilon_hat,
    coverage_lower_bound,
    multilabel_predict,
    predict_set,
)
from introplan.domain import (
    PlanOption,
    PredictionMode,
    PredictionOutcome,
    Scenario,
    ScenarioKind,
    load_scenarios,
)
from introplan.knowledge import KnowledgeBase, build_knowledge_base, load_kb, retrieve_similar, save_kb
from introplan.metrics import MetricsReport, classify_errors, compute_metrics
from introplan.planner import Backends, PlannerConfig, plan, resolve_help

__version__ = "0.1.0"

__all__ = [
    "Backends",
    "CalibrationResult",
    "InfeasibleTargetError",
    "KnowledgeBase",
    "MetricsReport",
    "PlanOption",
    "PlannerConfig",
    "PredictionMode",
    "PredictionOutcome",
    "Scenario",
    "ScenarioKind",
    "TemplateVersionMismatch",
    "build_knowledge_base",
    "calibrate",
    "choose_epsilon_hat",
    "classify_errors",
    "compute_metrics",
    "coverage_lower_bound",
    "load_kb",
    "load_scenarios",
    "multilabel_predict",
    "plan",
    "predict_set",
    "resolve_help",
    "retrieve_similar",
    "save_kb",
]
