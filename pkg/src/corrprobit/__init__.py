"""Learning correlated probit choice models from best-of-three rankings."""

from .model import ProbitModel, normalize, to_diffform, from_diffform
from .probability import (
    PERMS,
    cone_probability_zero_mean,
    pairwise_probability,
    triple_rank_probabilities,
)

__all__ = [
    "PERMS",
    "ProbitModel",
    "cone_probability_zero_mean",
    "from_diffform",
    "normalize",
    "pairwise_probability",
    "to_diffform",
    "triple_rank_probabilities",
]
