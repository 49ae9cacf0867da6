"""phi^4 Markov random field for multivariate return series."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    LAMBDA_MIN,
    CouplingSet,
    MomentAccumulator,
    action,
    action_delta,
    grad_action,
    load_checkpoint,
    save_checkpoint,
)
from .sampler import SamplerConfig, conditional_mean, sample  # noqa: E402
from .trainer import InitSpec, TrainConfig, kl_gradient, train  # noqa: E402

__all__ = [
    "LAMBDA_MIN",
    "CouplingSet",
    "InitSpec",
    "MomentAccumulator",
    "SamplerConfig",
    "TrainConfig",
    "action",
    "action_delta",
    "conditional_mean",
    "grad_action",
    "kl_gradient",
    "load_checkpoint",
    "sample",
    "save_checkpoint",
    "train",
]
