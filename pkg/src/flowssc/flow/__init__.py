"""Shortcut flow matching: objectives, step schedules, samplers and oracles."""

from .oracle import (
    OracleReport,
    TimeLinearRegressor,
    ToyConfig,
    ToyShortcutNet,
    gaussian_oracle_check,
    gaussian_velocity,
    moment_gaps,
    one_step_vs_euler,
    toy_data,
    train_toy_shortcut,
)
from .shortcut import (
    StepSchedule,
    consistency_residual,
    euler_oracle,
    flow_matching_loss,
    initial_noise,
    interpolate,
    sample,
    sample_t_d,
    self_consistency_target,
    shortcut_loss,
)

__all__ = [
    "OracleReport", "StepSchedule", "TimeLinearRegressor", "ToyConfig", "ToyShortcutNet",
    "consistency_residual", "euler_oracle", "flow_matching_loss", "gaussian_oracle_check",
    "gaussian_velocity", "initial_noise", "interpolate", "moment_gaps", "one_step_vs_euler", "sample",
    "sample_t_d", "self_consistency_target", "shortcut_loss", "toy_data", "train_toy_shortcut",
]
