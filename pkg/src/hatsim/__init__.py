"""Selective multi-source knowledge fusion for expanding heterogeneous learning systems."""
from .config import ExperimentConfig, StrategySpec, PRESETS, parse_strategy
from .experiment import run_baseline_grid, run_mrse, run_otse, run_sweep

__version__ = "0.1.0"
__all__ = ["ExperimentConfig", "StrategySpec", "PRESETS", "parse_strategy",
           "run_otse", "run_mrse", "run_baseline_grid", "run_sweep"]
