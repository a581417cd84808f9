"""Unsupervised products of expert capsules trained with dynamic routing."""

from .capsule_core import (
    RoutingState,
    brute_force_joint,
    conditional_firing_prob,
    energy,
    route,
    route_reverse,
    squash,
    squash_magnitude_as_sigmoid,
    unnormalized_marginal,
    unsquash,
)
from .numerics import Rng, SgdState, gaussian_sample, matvec, sgd_step

__version__ = "0.1.0"
