"""Causal time-series forecasting with per-node continuous normalizing
flows on a DAG: observational, interventional and counterfactual rollouts,
exact trajectory log-densities, a synthetic SCM laboratory, and the
matching evaluation metrics."""

from .errors import FlowcastError
from .flow import FlowConfig, VelocityNet, decode, encode, log_density
from .forecaster import (
    CfRollout,
    Rollout,
    TrajectoryScore,
    counterfactual,
    forecast,
    score_trajectory,
)
from .graph import CausalDag, InterventionSchedule, build_dag, parents_of
from .model import ForecastModel, init_model
from .scm import (
    Family,
    Mechanism,
    ScmSpec,
    SeriesBatch,
    build_intervention_by_shift,
    draw_spec,
    simulate,
    simulate_counterfactual,
    simulate_interventional,
)
from .training import TrainConfig, cfm_loss, reference_path, train

__all__ = [
    "FlowcastError",
    "FlowConfig", "VelocityNet", "encode", "decode", "log_density",
    "Rollout", "CfRollout", "TrajectoryScore",
    "forecast", "counterfactual", "score_trajectory",
    "CausalDag", "InterventionSchedule", "build_dag", "parents_of",
    "ForecastModel", "init_model",
    "Family", "Mechanism", "ScmSpec", "SeriesBatch",
    "simulate", "simulate_interventional", "simulate_counterfactual",
    "build_intervention_by_shift", "draw_spec",
    "TrainConfig", "cfm_loss", "reference_path", "train",
]

__version__ = "0.1.0"
