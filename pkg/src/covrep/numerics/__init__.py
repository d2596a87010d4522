from .chi2 import DomainError, chi2_cdf, chi2_inv, chi2_pdf, gammainc_lower
from .mlp import (
    GradientBundle,
    MlpParams,
    ShapeError,
    backprop,
    backward,
    forward,
    forward_cache,
    init_mlp,
    linear_map,
)
from .optim import Adam, make_stepper, sgd_step
from .rng import Rng, as_generator, stream_id

__all__ = [
    "Adam",
    "DomainError",
    "GradientBundle",
    "MlpParams",
    "Rng",
    "ShapeError",
    "as_generator",
    "backprop",
    "backward",
    "chi2_cdf",
    "chi2_inv",
    "chi2_pdf",
    "forward",
    "forward_cache",
    "gammainc_lower",
    "init_mlp",
    "linear_map",
    "make_stepper",
    "sgd_step",
    "stream_id",
]
