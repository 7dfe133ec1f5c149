"""Exact signal-wise attribution of constrained, cost-aware portfolios."""

from .attribution import (
    AttributionHistory,
    BacktestOptions,
    Mode,
    StepError,
    run_backtest,
    transfer_coefficient,
    transfer_report,
)
from .effective import attribution_multipliers, effective_matrices, projection_split
from .model import (
    DynamicModelParams,
    MarketModel,
    ModelValidationError,
    PortfolioState,
    SignalSet,
    build_static_matrices,
    scale_signals_dynamic,
)
from .oracle import OracleSpec, oracle_solve
from .qpsolver import ConstraintKind, ConstraintSpec, assemble_problem, long_only, solve
from .scenarios import (
    Scenario,
    SignalGenSpec,
    generate_case_study,
    load_scenario,
    load_scenario_csv,
    save_scenario,
    validate_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "AttributionHistory",
    "BacktestOptions",
    "ConstraintKind",
    "ConstraintSpec",
    "DynamicModelParams",
    "MarketModel",
    "Mode",
    "ModelValidationError",
    "OracleSpec",
    "PortfolioState",
    "Scenario",
    "SignalGenSpec",
    "SignalSet",
    "StepError",
    "assemble_problem",
    "attribution_multipliers",
    "build_static_matrices",
    "effective_matrices",
    "generate_case_study",
    "load_scenario",
    "load_scenario_csv",
    "long_only",
    "oracle_solve",
    "projection_split",
    "run_backtest",
    "save_scenario",
    "scale_signals_dynamic",
    "solve",
    "transfer_coefficient",
    "transfer_report",
    "validate_scenario",
]
