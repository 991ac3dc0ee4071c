"""
Chain driver: initialisation, the per-iteration sweep, audits and multi-chain runs.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from core.exceptions import ChainAbortedError, DegenerateFrameError, NumericalRankError
from core.schema import SourceSet
from optimizer.schema import SourceGrid
from sampler.jumps import dimension_move
from sampler.moves import BLOCKS, gibbs_background, mh_block_update, update_opening_angles, update_sigma, update_wind_bias
from sampler.posterior import refresh, residual
from sampler.schema import ChainState, ChainTrace, ProposalScales, Schedule, Target, TraceTables

AUDIT_TOLERANCE = 1e-8


def initial_state(target: Target, locations, widths, rates, beta=None, sigma: float = 3.0) -> ChainState:
    """State at the given sources with fresh coupling and log posterior."""
    background = target.background
    beta = np.asarray(beta, dtype=float) if beta is not None and np.shape(beta) == (background.r,) else background.beta0.copy()
    state = ChainState(
        locations=np.asarray(locations, dtype=float).reshape(-1, 2),
        widths=np.asarray(widths, dtype=float).ravel(),
        rates=np.asarray(rates, dtype=float).ravel(),
        beta=beta,
        sigma=float(sigma),
        bias=target.geometry.wind_bias,
        angle_h=target.geometry.opening_angle_h,
        angle_v=target.geometry.opening_angle_v,
        coupling=np.zeros((target.n, 0)),
    )
    return refresh(state, target)


def initial_state_from_grid(
    grid: SourceGrid,
    k: int,
    target: Target,
    rng: np.random.Generator,
    beta=None,
    sigma: float = 3.0,
) -> ChainState:
    """
    Start from k grid cells drawn without replacement, weighted by fitted rate.

    Each chosen cell becomes a source at its centre with half width cell/2 and the cell's
    rate. Fewer than k sources are used when fewer cells have a positive rate.
    """
    priors = target.priors
    rates = np.zeros(grid.m) if grid.rates is None else grid.rates
    candidates = np.flatnonzero(rates > 0)
    count = min(k, candidates.size, priors.m_max)
    chosen = rng.choice(candidates, size=count, replace=False, p=rates[candidates] / rates[candidates].sum()) if count else np.zeros(0, dtype=int)
    centers = grid.cell_centers()[chosen]
    widths = np.full(count, min(0.5 * grid.cell_size, priors.width_max))
    logger.info(f"initial state: {count} sources drawn from {candidates.size} non-zero cells")
    return initial_state(target, centers, widths, np.minimum(rates[chosen], priors.rate_max), beta, sigma)


def initial_state_from_sources(sources: SourceSet, target: Target, beta=None, sigma: float = 3.0) -> ChainState:
    """
    State at explicit sources.

    Raises:
        ValueError: If there are more sources than the prior allows.
    """
    sources.check_capacity(target.priors.m_max)
    return initial_state(target, sources.locations(), sources.half_widths(), sources.rates(), beta, sigma)


def audit(state: ChainState, target: Target) -> float:
    """Relative gap between the cached log posterior and a from-scratch recomputation."""
    fresh = refresh(state, target).log_posterior
    return abs(state.log_posterior - fresh) / max(1.0, abs(fresh))


def run_chain(
    target: Target,
    scales: ProposalScales,
    init: ChainState,
    schedule: Schedule,
    rng: np.random.Generator,
    chain: int = 0,
) -> ChainTrace:
    """
    Run one chain.

    Every iteration updates source locations, widths and rates, sigma, the background
    (exact draw), the wind bias and opening angles when enabled, then makes one dimension
    move. Snapshots are kept after burn-in every ``thin`` iterations; background and
    residual vectors every ``background_thin`` snapshots.

    Raises:
        ChainAbortedError: On a numerical failure or a failed audit; ``trace`` holds the
            snapshots collected so far.
    """
    trace = ChainTrace(chain=chain)
    tally = trace.tally
    state = refresh(init, target)
    if not np.isfinite(state.log_posterior):
        raise ChainAbortedError("initial state lies outside the prior support", trace=trace)
    iteration = 0
    try:
        for iteration in range(1, schedule.iterations + 1):
            for block in BLOCKS:
                state = mh_block_update(state, block, target, scales, rng, tally)
            state = update_sigma(state, target, scales, rng, tally)
            if target.use_likelihood:
                state = gibbs_background(state, target, rng, tally)
            if target.sample_bias:
                state = update_wind_bias(state, target, scales, rng, tally)
            if target.sample_angles:
                state = update_opening_angles(state, target, scales, rng, tally)
            state = dimension_move(state, target, scales, rng, tally)

            if iteration % schedule.audit_every == 0:
                gap = audit(state, target)
                if gap > AUDIT_TOLERANCE:
                    raise ChainAbortedError(f"chain {chain}: cached log posterior drifted by {gap:.3e} at iteration {iteration}", trace=trace)
            if iteration > schedule.burn_in and (iteration - schedule.burn_in) % schedule.thin == 0:
                keep = trace.snapshots % schedule.background_thin == 0
                trace.record(
                    iteration,
                    state,
                    target.background.evaluate(state.beta) if keep else None,
                    residual(state, target) if keep else None,
                )
            if iteration % schedule.log_every == 0:
                logger.info(
                    f"chain {chain} iteration {iteration}: m={state.m}, sigma={state.sigma:.3f}, "
                    f"bias={np.degrees(state.bias):.2f} deg, log posterior {state.log_posterior:.3f}"
                )
    except (NumericalRankError, DegenerateFrameError, FloatingPointError, np.linalg.LinAlgError) as e:
        raise ChainAbortedError(f"chain {chain} aborted at iteration {iteration}: {e}", trace=trace) from e
    trace.completed = True
    logger.info(f"chain {chain} finished: {trace.snapshots} snapshots")
    return trace


@dataclass(frozen=True)
class ChainStart:
    """How a chain picks its initial state: from fitted grid rates or explicit sources."""
    grid: Optional[SourceGrid] = None
    sources: Optional[SourceSet] = None
    k: int = 15
    beta: Optional[np.ndarray] = None
    sigma: float = 3.0

    def build(self, target: Target, rng: np.random.Generator) -> ChainState:
        if self.sources is not None:
            return initial_state_from_sources(self.sources, target, self.beta, self.sigma)
        if self.grid is not None:
            return initial_state_from_grid(self.grid, self.k, target, rng, self.beta, self.sigma)
        raise ValueError("a chain start needs a grid or explicit sources")


def chain_seeds(seed: int, chains: int) -> list:
    return np.random.SeedSequence(seed).spawn(chains)


def _run_seeded(target: Target, scales: ProposalScales, start: ChainStart, schedule: Schedule, seed, chain: int) -> ChainTrace:
    rng = np.random.default_rng(seed)
    return run_chain(target, scales, start.build(target, rng), schedule, rng, chain)


def run_chains(
    target: Target,
    scales: ProposalScales,
    start: ChainStart,
    schedule: Schedule,
    seed: int,
    chains: int = 1,
) -> List[ChainTrace]:
    """
    Run independent chains with seeds spawned from ``seed``; more than one runs in worker processes.
    """
    seeds = chain_seeds(seed, chains)
    if chains == 1:
        return [_run_seeded(target, scales, start, schedule, seeds[0], 0)]
    with ProcessPoolExecutor(max_workers=chains) as pool:
        futures = [pool.submit(_run_seeded, target, scales, start, schedule, seeds[c], c) for c in range(chains)]
        return [future.result() for future in futures]


def merge_traces(traces: List[ChainTrace]) -> TraceTables:
    """Concatenate chains, each row tagged with its ``chain``."""
    tables = [trace.tables() for trace in traces]
    return TraceTables(*(
        pd.concat([getattr(t, name) for t in tables], ignore_index=True)
        for name in ("scalars", "sources", "background", "residuals", "acceptance")
    ))
