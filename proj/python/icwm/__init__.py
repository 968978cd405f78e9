"""In-context world model toolkit (Python bindings)."""

from ._icwm import (
    ConfigError,
    ContractViolation,
    DiscreteEnv,
    GsaModel,
    InsufficientDataError,
    NumericalError,
    build_dataset,
    cartpole_step,
    check_config,
    el_bound,
    el_predict,
    el_threshold,
    er_bound,
    er_predict,
    format_double,
    kl_divergence,
    run_experiment,
    sample_env_family,
    tv_distance,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DiscreteEnv",
    "GsaModel",
    "InsufficientDataError",
    "NumericalError",
    "build_dataset",
    "cartpole_step",
    "check_config",
    "el_bound",
    "el_predict",
    "el_threshold",
    "er_bound",
    "er_predict",
    "format_double",
    "kl_divergence",
    "run_experiment",
    "sample_env_family",
    "tv_distance",
]
