"""
Comparison of estimated sources or emission maps against a known truth.
"""
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from core.schema import SourceSet
from optimizer.schema import SourceGrid
from synth.schema import GroundTruth, ScoreReport, SourceMatch


def extract_sources(values, grid: SourceGrid, threshold: float = 0.0) -> SourceSet:
    """
    Turn an emission map into discrete sources.

    Connected groups of cells above ``threshold`` become one source at their rate-weighted
    centroid carrying the summed rate.

    Args:
        values: Per-cell rates, row-major over (north, east).
        grid (SourceGrid): Grid of the map.
        threshold (float): Minimum cell rate, m3/s.

    Returns:
        SourceSet: One source per connected component.
    """
    values = np.asarray(values, dtype=float).reshape(grid.ny, grid.nx)
    labels, count = ndimage.label(values > threshold)
    if count == 0:
        return SourceSet()
    index = np.arange(1, count + 1)
    rates = np.asarray(ndimage.sum(values, labels, index))
    centers = grid.cell_centers().reshape(grid.ny, grid.nx, 2)
    east = np.asarray(ndimage.sum(values * centers[..., 0], labels, index)) / rates
    north = np.asarray(ndimage.sum(values * centers[..., 1], labels, index)) / rates
    return SourceSet.from_arrays(np.column_stack([east, north]), 0.5 * grid.cell_size, rates)


def score(
    estimate: Union[SourceSet, np.ndarray],
    truth: Union[GroundTruth, SourceSet],
    match_radius: float,
    grid: Optional[SourceGrid] = None,
    threshold: float = 0.0,
) -> ScoreReport:
    """
    Greedy nearest matching of estimated to true sources within ``match_radius``.

    The closest unmatched (truth, estimate) pair is matched first, then the next closest,
    until no remaining pair lies within the radius.

    Args:
        estimate: Estimated sources, or a per-cell map (requires ``grid``).
        truth: Ground truth or true sources.
        match_radius (float): Largest distance counted as a hit, m.
        grid (Optional[SourceGrid]): Grid of a map estimate.
        threshold (float): Cell threshold for map estimates.

    Returns:
        ScoreReport: Hits, misses, spurious estimates and per-hit errors.
    """
    if not isinstance(estimate, SourceSet):
        if grid is None:
            raise ValueError("scoring a map needs its grid")
        estimate = extract_sources(estimate, grid, threshold)
    true_sources = truth.sources if isinstance(truth, GroundTruth) else truth
    true_xy, est_xy = true_sources.locations(), estimate.locations()
    true_rates, est_rates = true_sources.rates(), estimate.rates()

    matches = []
    if true_sources.m and estimate.m:
        distance = np.hypot(*(true_xy[:, None, :] - est_xy[None, :, :]).transpose(2, 0, 1))
        order = np.argsort(distance, axis=None, kind="stable")
        used_truth, used_estimate = set(), set()
        for flat in order:
            i, j = np.unravel_index(flat, distance.shape)
            if distance[i, j] > match_radius:
                break
            if i in used_truth or j in used_estimate:
                continue
            used_truth.add(i)
            used_estimate.add(j)
            matches.append(SourceMatch(
                truth_index=int(i),
                estimate_index=int(j),
                location_error_m=float(distance[i, j]),
                true_rate_m3s=float(true_rates[i]),
                estimated_rate_m3s=float(est_rates[j]),
                rate_error=float(abs(est_rates[j] - true_rates[i]) / true_rates[i]) if true_rates[i] > 0 else None,
            ))
    matches.sort(key=lambda match: match.truth_index)
    return ScoreReport(
        match_radius_m=match_radius,
        hits=len(matches),
        misses=true_sources.m - len(matches),
        spurious=estimate.m - len(matches),
        matches=matches,
    )
