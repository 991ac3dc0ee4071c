"""
Dimension-changing moves: birth, death, split and coalesce.

States are treated as unordered source sets. A birth draws the new source from its prior,
so the prior cancels and the set-size factor (m + 1) cancels the 1 / (m + 1) chance of
picking it for death. A split of one of m sources with draws r uniform on [-E/2, E/2]
maps (z, w, s, r) to two children with Jacobian 2^4; the children are unordered, so (r, -r)
give the same pair and the effective factor is 8. The reverse coalesce picks one of the
P(theta') feasible pairs, those whose implied r lies inside [-E/2, E/2] in every coordinate.
"""
import math
from typing import List, Optional, Tuple

import numpy as np

from sampler.moves import accept
from sampler.posterior import log_posterior, source_coupling
from sampler.schema import AcceptanceTally, ChainState, ProposalScales, Target

JUMP_MOVES = ("birth", "death", "split", "coalesce")
SPLIT_JACOBIAN = 8.0


def split_children(parent: np.ndarray, draws: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Children parent + r and parent - r of a (east, north, width, rate) row."""
    parent = np.asarray(parent, dtype=float)
    draws = np.asarray(draws, dtype=float)
    return parent + draws, parent - draws


def merge_pair(plus: np.ndarray, minus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`split_children`: parent midpoint and half difference r."""
    plus = np.asarray(plus, dtype=float)
    minus = np.asarray(minus, dtype=float)
    return 0.5 * (plus + minus), 0.5 * (plus - minus)


def coalescible_pairs(params: np.ndarray, scales: ProposalScales) -> List[Tuple[int, int]]:
    """Pairs (i, j), i < j, whose half difference is a feasible split draw."""
    params = np.asarray(params, dtype=float).reshape(-1, 4)
    limit = scales.split_widths
    m = params.shape[0]
    if m < 2:
        return []
    gap = np.abs(params[:, None, :] - params[None, :, :])
    feasible = np.all(gap <= limit, axis=2)
    i, j = np.nonzero(np.triu(feasible, k=1))
    return list(zip(i.tolist(), j.tolist()))


def split_log_ratio(parent_log_post: float, child_log_post: float, m_parent: int, child_pairs: int, scales: ProposalScales) -> float:
    """Log acceptance ratio of splitting one of ``m_parent`` sources."""
    return (
        child_log_post
        - parent_log_post
        + float(np.sum(np.log(scales.split_widths)))
        + math.log(SPLIT_JACOBIAN)
        + math.log(m_parent * (m_parent + 1))
        - math.log(child_pairs)
    )


def birth_log_ratio(current_log_post: float, proposed_log_post: float, target: Target) -> float:
    return proposed_log_post - current_log_post + math.log(target.priors.source_volume)


def _from_params(state: ChainState, params: np.ndarray, coupling: np.ndarray) -> ChainState:
    params = np.asarray(params, dtype=float).reshape(-1, 4)
    return state.evolve(
        locations=params[:, :2].copy(),
        widths=params[:, 2].copy(),
        rates=params[:, 3].copy(),
        coupling=coupling,
    )


def _columns(target: Target, state: ChainState, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=float).reshape(-1, 4)
    return source_coupling(target, params[:, :2], params[:, 2], state.bias, state.angle_h, state.angle_v)


def propose_birth(state: ChainState, target: Target, rng: np.random.Generator, source=None) -> Optional[Tuple[ChainState, float]]:
    """
    New source drawn from the prior, appended last.

    Returns:
        Optional[Tuple[ChainState, float]]: Candidate and log acceptance ratio, None when m = m_max.
    """
    if state.m >= target.priors.m_max:
        return None
    if source is None:
        location, width, rate = target.priors.draw_source(rng)
        source = (location[0], location[1], width, rate)
    row = np.asarray(source, dtype=float).reshape(1, 4)
    params = np.vstack([state.source_matrix().reshape(-1, 4), row])
    coupling = np.hstack([state.coupling, _columns(target, state, row)])
    candidate = _from_params(state, params, coupling)
    value = log_posterior(candidate, target)
    return candidate.evolve(log_posterior=value), birth_log_ratio(state.log_posterior, value, target)


def propose_death(state: ChainState, target: Target, rng: np.random.Generator, index: Optional[int] = None) -> Optional[Tuple[ChainState, float]]:
    """Remove a uniformly chosen source; None when m = 0."""
    if state.m == 0:
        return None
    index = int(rng.integers(state.m)) if index is None else index
    params = np.delete(state.source_matrix(), index, axis=0)
    coupling = np.delete(state.coupling, index, axis=1)
    candidate = _from_params(state, params, coupling)
    value = log_posterior(candidate, target)
    return candidate.evolve(log_posterior=value), -birth_log_ratio(value, state.log_posterior, target)


def propose_split(
    state: ChainState,
    target: Target,
    scales: ProposalScales,
    rng: np.random.Generator,
    index: Optional[int] = None,
    draws: Optional[np.ndarray] = None,
) -> Optional[Tuple[ChainState, float]]:
    """
    Split source ``index`` into parent + r (kept in place) and parent - r (appended).

    Returns None when m = 0, m = m_max, or a child leaves the prior support.
    """
    m = state.m
    if m == 0 or m >= target.priors.m_max:
        return None
    index = int(rng.integers(m)) if index is None else index
    draws = (rng.uniform(-0.5, 0.5, 4) * scales.split_widths) if draws is None else np.asarray(draws, dtype=float)
    params = state.source_matrix()
    plus, minus = split_children(params[index], draws)
    params = np.vstack([params, minus])
    params[index] = plus
    if not target.priors.in_support(params[:, :2], params[:, 2], params[:, 3]):
        return None
    coupling = np.hstack([state.coupling, _columns(target, state, minus)])
    coupling[:, index] = _columns(target, state, plus)[:, 0]
    candidate = _from_params(state, params, coupling)
    value = log_posterior(candidate, target)
    pairs = len(coalescible_pairs(params, scales))
    return candidate.evolve(log_posterior=value), split_log_ratio(state.log_posterior, value, m, pairs, scales)


def propose_coalesce(
    state: ChainState,
    target: Target,
    scales: ProposalScales,
    rng: np.random.Generator,
    pair: Optional[Tuple[int, int]] = None,
) -> Optional[Tuple[ChainState, float]]:
    """
    Merge a uniformly chosen feasible pair (i, j) into its midpoint at i, dropping j.

    Returns None when m < 2 or no pair is feasible.
    """
    m = state.m
    if m < 2:
        return None
    params = state.source_matrix()
    pairs = coalescible_pairs(params, scales)
    if not pairs:
        return None
    i, j = pairs[int(rng.integers(len(pairs)))] if pair is None else pair
    parent, _ = merge_pair(params[i], params[j])
    params[i] = parent
    params = np.delete(params, j, axis=0)
    coupling = state.coupling.copy()
    coupling[:, i] = _columns(target, state, parent)[:, 0]
    coupling = np.delete(coupling, j, axis=1)
    candidate = _from_params(state, params, coupling)
    value = log_posterior(candidate, target)
    return candidate.evolve(log_posterior=value), -split_log_ratio(value, state.log_posterior, m - 1, len(pairs), scales)


def _resolve(state: ChainState, proposal, move: str, rng: np.random.Generator, tally: Optional[AcceptanceTally]) -> ChainState:
    if proposal is None:
        if tally is not None:
            tally.record(move, False)
        return state
    candidate, log_ratio = proposal
    accepted = accept(log_ratio, rng)
    if tally is not None:
        tally.record(move, accepted)
    return candidate if accepted else state


def birth(state, target, rng, tally=None) -> ChainState:
    return _resolve(state, propose_birth(state, target, rng), "birth", rng, tally)


def death(state, target, rng, tally=None) -> ChainState:
    return _resolve(state, propose_death(state, target, rng), "death", rng, tally)


def split(state, target, scales, rng, tally=None) -> ChainState:
    return _resolve(state, propose_split(state, target, scales, rng), "split", rng, tally)


def coalesce(state, target, scales, rng, tally=None) -> ChainState:
    return _resolve(state, propose_coalesce(state, target, scales, rng), "coalesce", rng, tally)


def dimension_move(state: ChainState, target: Target, scales: ProposalScales, rng: np.random.Generator, tally=None) -> ChainState:
    """One of birth, death, split or coalesce, each with probability 1/4."""
    move = JUMP_MOVES[int(rng.integers(len(JUMP_MOVES)))]
    if move == "birth":
        return birth(state, target, rng, tally)
    if move == "death":
        return death(state, target, rng, tally)
    if move == "split":
        return split(state, target, scales, rng, tally)
    return coalesce(state, target, scales, rng, tally)
