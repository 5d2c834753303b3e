"""Intraday volume-ratio forecasting with a Student-t transformer, recurrent
baselines, spike diagnostics and a bar-level VWAP execution simulator."""

from .marketdata import (
    DataError, Market, MinuteBar, StockMeta, SyntheticConfig, TradingDay,
    day_vwap, detect_vi, generate_synthetic, load_minute_bars, turnover_rate,
)
from .features import DatasetSplit, FeatureWindow, WindowSet, build_windows, ratio_transform, split_by_date
from .model import (
    Forecaster, ModelConfig, RecurrentBaseline, StudentTParams,
    adjusted_predict, build_model, greedy_predict, load_checkpoint, save_checkpoint, student_t_nll,
)
from .training import OptimConfig, TrainReport, adamw_step, evaluate, train
from .analysis import OLSResult, ols, performance_regression, spike_diff_regression, spike_gate, spike_level_regression
from .execsim import ExecutionPlan, FillModelConfig, SimResult, allocate_quantity, perf_bp, simulate_day, vi_stress

__version__ = "0.1.0"
