"""Factor regime detection with sparse jump models and Black-Litterman factor allocation."""

__version__ = "0.1.0"

from .backtest import PerformanceReport, ew_benchmark, max_drawdown, performance_report, run_dynamic
from .black_litterman import Equilibrium, allocate, build_views, solve_mvo, target_tracking_error
from .features import build_features, standardize
from .jump_model import (
    JumpModelConfig,
    JumpModelFit,
    OnlineState,
    fit_jump_model,
    fit_sparse_jump_model,
    online_infer,
    optimal_states,
)
from .market_data import AlignedPanel, DataError, ReturnSeries, load_panel
from .strategy import RegimeSignal, TuningGrid, TuningSchedule, run_long_short, tune_hyperparameters
from .synthetic import HmmSpec, balanced_accuracy, simulate
