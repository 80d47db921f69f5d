"""Deep martingale upper bounds and deep stopping lower bounds for Bermudan problems."""
from .errors import ConfigError, InvalidArgumentError, TrainingDivergenceError, UnsupportedModelError
from .experiment import ExperimentConfig, ResultRow, run_experiment, sweep_dimension, sweep_n0
from .kernels import BACKEND
from .market import (GBM, BasketPut, GenericAffine, MaxCall, TimeGrid, brownian_motion,
                     build_grid, simulate_paths)
from .stats import confidence_interval, normal_quantile, sample_variance
from .training import TrainConfig

__version__ = "0.1.0"
