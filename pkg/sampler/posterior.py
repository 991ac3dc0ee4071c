"""
Unnormalised log posterior of the source mixture model.
"""
import math

import numpy as np

from plume.kernel import plume_columns
from sampler.schema import ChainState, Target


def source_coupling(target: Target, locations, widths, bias: float, angle_h: float, angle_v: float) -> np.ndarray:
    """Coupling columns in ppb per m3/s for the given sources and geometry."""
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    geom = target.geometry.model_copy(update={"wind_bias": bias, "opening_angle_h": angle_h, "opening_angle_v": angle_v})
    columns = plume_columns(
        target.positions,
        target.wind,
        locations,
        np.asarray(widths, dtype=float),
        np.full(locations.shape[0], target.source_height),
        geom,
    )
    return target.coupling_scale * columns


def state_coupling(state: ChainState, target: Target) -> np.ndarray:
    return source_coupling(target, state.locations, state.widths, state.bias, state.angle_h, state.angle_v)


def residual(state: ChainState, target: Target) -> np.ndarray:
    """y - (A s + P beta), ppb."""
    return target.concentrations - (state.coupling @ state.rates + target.background.basis @ state.beta)


def in_support(state: ChainState, target: Target) -> bool:
    priors = target.priors
    if state.m > priors.m_max:
        return False
    if not priors.sigma_range[0] <= state.sigma <= priors.sigma_range[1]:
        return False
    if target.sample_bias and not -math.pi < state.bias <= math.pi:
        return False
    if target.sample_angles:
        lo, hi = priors.angle_range
        if not (lo <= state.angle_h <= hi and lo <= state.angle_v <= hi):
            return False
    return priors.in_support(state.locations, state.widths, state.rates)


def log_likelihood(state: ChainState, target: Target) -> float:
    """Gaussian log likelihood with its -n log sigma normalisation (2 pi constant dropped)."""
    e = residual(state, target)
    return -target.n * math.log(state.sigma) - 0.5 * float(e @ e) / state.sigma ** 2


def log_prior(state: ChainState, target: Target) -> float:
    priors = target.priors
    background = target.background
    value = -background.penalty(state.beta)
    value -= state.m * math.log(priors.source_volume)
    value -= math.log(priors.m_max + 1)
    lo, hi = priors.sigma_range
    value -= math.log(state.sigma) + math.log(math.log(hi / lo))
    if target.sample_bias:
        value -= math.log(2.0 * math.pi)
    if target.sample_angles:
        lo, hi = priors.angle_range
        value -= math.log(state.angle_h) + math.log(state.angle_v) + 2.0 * math.log(math.log(hi / lo))
    return value


def log_posterior(state: ChainState, target: Target) -> float:
    """
    Log of the unnormalised posterior density, -inf outside the prior support.

    Sources enter as labelled, exchangeable parameters: each contributes -log(R_z1 R_z2 R_w R_s),
    and the source count has prior 1 / (m_max + 1).

    Args:
        state (ChainState): Parameters with a coupling matrix consistent with them.
        target (Target): Data, background model and priors.

    Returns:
        float: Log posterior.
    """
    if not in_support(state, target):
        return -np.inf
    value = log_prior(state, target)
    if target.use_likelihood:
        value += log_likelihood(state, target)
    return value


def refresh(state: ChainState, target: Target) -> ChainState:
    """Rebuild the cached coupling and log posterior from scratch."""
    fresh = state.evolve(coupling=state_coupling(state, target))
    return fresh.evolve(log_posterior=log_posterior(fresh, target))
