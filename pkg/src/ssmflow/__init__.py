"""Normalising-flow variational inference for SDE state-space models."""
from .flows import VariationalFamily, build_feature_windows, global_sample, local_sample
from .models import ModelSpec, ObservationSeries, builtin_ou, builtin_sir, get_model, simulate
from .oracle import ff_marginal_loglik, rwmh_posterior
from .trainer import TrainConfig, posterior_sample, train

__all__ = [
    "ModelSpec",
    "ObservationSeries",
    "TrainConfig",
    "VariationalFamily",
    "build_feature_windows",
    "builtin_ou",
    "builtin_sir",
    "ff_marginal_loglik",
    "get_model",
    "global_sample",
    "local_sample",
    "posterior_sample",
    "rwmh_posterior",
    "simulate",
    "train",
]
