"""Deterministic simulator of asynchronous pipeline x data-parallel optimisation."""
from .averaging import AveragingConfig, PendingAverage
from .metrics import MetricsRecord, consensus_error, ema_variance, read_trajectory, write_trajectory
from .model import MlpModel, QuadraticModel
from .numerics import ConfigError, ParamVector, QuantScheme, Rng, SubsetMask, quantize, sample_subset
from .optim import EmaSchedule, LrSchedule, OptimizerState, apply_update, lambda_at, lr_at
from .pipeline import StageDelayConfig, WeightHistory, WorkerReplica, delayed_step
from .simulator import MeshConfig, Trajectory, evaluate_consensus_model, heterogeneous_schedule, run

__version__ = "0.1.0"
