"""
Fixed-dimension updates: random-walk Metropolis blocks, the exact background draw,
and the noise, wind-bias and opening-angle updates.
"""
import math
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.exceptions import NumericalRankError
from core.geometry import wrap_angle
from sampler.posterior import log_posterior, source_coupling
from sampler.schema import AcceptanceTally, ChainState, ProposalScales, Target

BLOCKS = ("locations", "widths", "rates")


def accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """Metropolis test; always consumes exactly one uniform draw."""
    u = rng.uniform()
    if np.isnan(log_ratio):
        return False
    return bool(log_ratio >= 0 or u < math.exp(log_ratio))


def _tally(tally: Optional[AcceptanceTally], move: str, accepted: bool) -> None:
    if tally is not None:
        tally.record(move, accepted)


def _column(target: Target, state: ChainState, location, width) -> np.ndarray:
    return source_coupling(target, location, [width], state.bias, state.angle_h, state.angle_v)[:, 0]


def mh_block_update(
    state: ChainState,
    block: str,
    target: Target,
    scales: ProposalScales,
    rng: np.random.Generator,
    tally: Optional[AcceptanceTally] = None,
) -> ChainState:
    """
    Update one parameter block source by source with a symmetric Gaussian random walk.

    Locations move jointly in (east, north) and candidates off the domain are rejected
    without evaluating the posterior. Widths and rates are reflected at zero, which keeps
    the proposal symmetric.

    Args:
        state (ChainState): Current state.
        block (str): One of ``locations``, ``widths`` or ``rates``.
        target (Target): Posterior definition.
        scales (ProposalScales): Random-walk standard deviations.
        rng (np.random.Generator): Random stream.
        tally (Optional[AcceptanceTally]): Receives one record per source.

    Returns:
        ChainState: Updated state.
    """
    if block not in BLOCKS:
        raise ValueError(f"unknown block {block}")
    priors = target.priors
    for j in range(state.m):
        if block == "locations":
            locations = state.locations.copy()
            locations[j] = locations[j] + rng.normal(0.0, scales.location, 2)
            if not priors.in_domain(locations[j])[0]:
                _tally(tally, block, False)
                continue
            coupling = state.coupling.copy()
            coupling[:, j] = _column(target, state, locations[j], state.widths[j])
            candidate = state.evolve(locations=locations, coupling=coupling)
        elif block == "widths":
            widths = state.widths.copy()
            widths[j] = abs(widths[j] + rng.normal(0.0, scales.width))
            if widths[j] > priors.width_max:
                _tally(tally, block, False)
                continue
            coupling = state.coupling.copy()
            coupling[:, j] = _column(target, state, state.locations[j], widths[j])
            candidate = state.evolve(widths=widths, coupling=coupling)
        else:
            rates = state.rates.copy()
            rates[j] = abs(rates[j] + rng.normal(0.0, scales.rate))
            candidate = state.evolve(rates=rates)
        value = log_posterior(candidate, target)
        accepted = accept(value - state.log_posterior, rng)
        if accepted:
            state = candidate.evolve(log_posterior=value)
        _tally(tally, block, accepted)
    return state


def background_conditional(state: ChainState, target: Target) -> Tuple[sp.csc_matrix, np.ndarray]:
    """
    Precision and linear term of the Gaussian full conditional of beta.

    Completing the square in the likelihood and the background prior gives precision
    sigma^-2 P^T P + mu J and mean its inverse applied to sigma^-2 P^T (y - A s) + mu J beta0.
    """
    background = target.background
    P = background.basis
    J = background.precision.matrix
    inv_var = 1.0 / state.sigma ** 2
    data = target.concentrations - state.coupling @ state.rates
    precision = (inv_var * (P.T @ P) + background.mu * J).tocsc()
    linear = inv_var * (P.T @ data) + background.mu * (J @ background.beta0)
    return precision, linear


def gibbs_background(
    state: ChainState,
    target: Target,
    rng: np.random.Generator,
    tally: Optional[AcceptanceTally] = None,
) -> ChainState:
    """
    Draw beta exactly from its full conditional.

    The draw solves the conditional precision against a perturbed right-hand side,
    sigma^-1 P^T e1 + sqrt(mu) R^T e2 with J = R^T R, whose covariance is that precision.

    Raises:
        NumericalRankError: If the conditional precision is singular.
    """
    background = target.background
    precision, linear = background_conditional(state, target)
    root = background.precision.root
    noise = background.basis.T @ rng.standard_normal(background.n) / state.sigma
    noise = noise + math.sqrt(background.mu) * (root.T @ rng.standard_normal(root.shape[0]))
    try:
        beta = spla.splu(precision).solve(linear + noise)
    except RuntimeError as e:
        raise NumericalRankError(f"background conditional is singular: {e}") from e
    if not np.all(np.isfinite(beta)):
        raise NumericalRankError("background draw is not finite")
    candidate = state.evolve(beta=beta)
    _tally(tally, "background", True)
    return candidate.evolve(log_posterior=log_posterior(candidate, target))


def update_sigma(
    state: ChainState,
    target: Target,
    scales: ProposalScales,
    rng: np.random.Generator,
    tally: Optional[AcceptanceTally] = None,
) -> ChainState:
    """Random walk on log sigma; the ratio carries the log-scale Jacobian sigma'/sigma."""
    proposed = state.sigma * math.exp(rng.normal(0.0, scales.log_sigma))
    candidate = state.evolve(sigma=proposed)
    value = log_posterior(candidate, target)
    accepted = accept(value - state.log_posterior + math.log(proposed) - math.log(state.sigma), rng)
    _tally(tally, "sigma", accepted)
    return candidate.evolve(log_posterior=value) if accepted else state


def update_wind_bias(
    state: ChainState,
    target: Target,
    scales: ProposalScales,
    rng: np.random.Generator,
    tally: Optional[AcceptanceTally] = None,
) -> ChainState:
    """Random walk on the wind bias modulo 2 pi; the whole coupling matrix is rebuilt."""
    proposed = float(wrap_angle(state.bias + rng.normal(0.0, scales.bias)))
    coupling = source_coupling(target, state.locations, state.widths, proposed, state.angle_h, state.angle_v)
    candidate = state.evolve(bias=proposed, coupling=coupling)
    value = log_posterior(candidate, target)
    accepted = accept(value - state.log_posterior, rng)
    _tally(tally, "bias", accepted)
    return candidate.evolve(log_posterior=value) if accepted else state


def update_opening_angles(
    state: ChainState,
    target: Target,
    scales: ProposalScales,
    rng: np.random.Generator,
    tally: Optional[AcceptanceTally] = None,
) -> ChainState:
    """Joint random walk on (log gamma_H, log gamma_V) with the log-scale Jacobian."""
    step = rng.normal(0.0, scales.log_angle, 2)
    angle_h = state.angle_h * math.exp(step[0])
    angle_v = state.angle_v * math.exp(step[1])
    candidate = state.evolve(angle_h=angle_h, angle_v=angle_v)
    if candidate.angle_h >= math.pi / 2 or candidate.angle_v >= math.pi / 2:
        _tally(tally, "angles", False)
        return state
    candidate = candidate.evolve(
        coupling=source_coupling(target, state.locations, state.widths, state.bias, angle_h, angle_v)
    )
    value = log_posterior(candidate, target)
    accepted = accept(value - state.log_posterior + float(np.sum(step)), rng)
    _tally(tally, "angles", accepted)
    return candidate.evolve(log_posterior=value) if accepted else state
