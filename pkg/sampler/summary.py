"""
Posterior summaries: gridded emission-rate quantile maps and background/residual bands.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from core.exceptions import UsageError
from optimizer.schema import SourceGrid
from sampler.schema import TraceTables


@dataclass
class PosteriorSummary:
    median: np.ndarray  # per cell, m3/s
    low: np.ndarray
    high: np.ndarray
    background_band: pd.DataFrame
    residuals: pd.DataFrame
    acceptance: pd.DataFrame
    scalars: dict = field(default_factory=dict)


def gridded_deposits(tables: TraceTables, grid: SourceGrid) -> np.ndarray:
    """
    Per-snapshot emission deposits: every source's rate added to the cell holding its location.

    Returns:
        np.ndarray: (snapshots, cells) array; sources off the grid are dropped.
    """
    keys = tables.scalars[["chain", "snapshot"]].to_numpy()
    row_of = {(int(c), int(s)): i for i, (c, s) in enumerate(keys)}
    deposits = np.zeros((len(keys), grid.m))
    if len(tables.sources):
        rows = np.array([row_of[(int(c), int(s))] for c, s in tables.sources[["chain", "snapshot"]].to_numpy()])
        cells = grid.cell_index(tables.sources[["east_m", "north_m"]].to_numpy())
        on_grid = cells >= 0
        np.add.at(deposits, (rows[on_grid], cells[on_grid]), tables.sources["rate_m3s"].to_numpy()[on_grid])
    return deposits


def _band(frame: pd.DataFrame, low: float, high: float) -> pd.DataFrame:
    if frame.empty:
        return pd.DataFrame({"measurement": [], "median_ppb": [], "low_ppb": [], "high_ppb": []})
    grouped = frame.groupby("measurement")["value_ppb"]
    median = grouped.median()
    return pd.DataFrame({
        "measurement": median.index.to_numpy().astype(int),
        "median_ppb": median.to_numpy(),
        "low_ppb": grouped.quantile(low / 100.0).to_numpy(),
        "high_ppb": grouped.quantile(high / 100.0).to_numpy(),
    })


def _interval(values: np.ndarray, low: float, high: float) -> dict:
    return {
        "median": float(np.median(values)),
        "low": float(np.percentile(values, low)),
        "high": float(np.percentile(values, high)),
    }


def summarize(
    tables: TraceTables,
    grid: SourceGrid,
    concentrations: Optional[np.ndarray] = None,
    low: float = 2.5,
    high: float = 97.5,
) -> PosteriorSummary:
    """
    Quantile maps and diagnostic bands from a (possibly merged) trace.

    Args:
        tables (TraceTables): Snapshots of one or more chains.
        grid (SourceGrid): Grid the deposits are binned on.
        concentrations (Optional[np.ndarray]): Measured ppb, paired with the residuals.
        low (float): Lower percentile.
        high (float): Upper percentile.

    Returns:
        PosteriorSummary: Median, low and high maps plus bands and acceptance rates.

    Raises:
        UsageError: If the trace holds no snapshots.
    """
    if tables.scalars.empty:
        raise UsageError("the trace holds no snapshots")
    deposits = gridded_deposits(tables, grid)
    background = _band(tables.background, low, high)
    residuals = _band(tables.residuals, low, high).rename(columns={
        "median_ppb": "residual_median_ppb", "low_ppb": "residual_low_ppb", "high_ppb": "residual_high_ppb",
    })
    if concentrations is not None and not residuals.empty:
        measured = np.asarray(concentrations, dtype=float)[residuals["measurement"].to_numpy()]
        residuals.insert(1, "measured_ppb", measured)
        residuals.insert(2, "fitted_ppb", measured - residuals["residual_median_ppb"].to_numpy())
    acceptance = tables.acceptance.groupby("move", sort=False)[["proposed", "accepted"]].sum().reset_index()
    acceptance["rate"] = acceptance["accepted"] / acceptance["proposed"].where(acceptance["proposed"] > 0)
    scalars = tables.scalars
    return PosteriorSummary(
        median=np.median(deposits, axis=0),
        low=np.percentile(deposits, low, axis=0),
        high=np.percentile(deposits, high, axis=0),
        background_band=background,
        residuals=residuals,
        acceptance=acceptance,
        scalars={
            "snapshots": int(len(scalars)),
            "chains": int(scalars["chain"].nunique()),
            "m": _interval(scalars["m"].to_numpy(), low, high),
            "sigma_ppb": _interval(scalars["sigma_ppb"].to_numpy(), low, high),
            "bias_deg": _interval(scalars["bias_deg"].to_numpy(), low, high),
            "angle_h_deg": _interval(scalars["angle_h_deg"].to_numpy(), low, high),
            "total_rate_m3s": _interval(scalars["total_rate_m3s"].to_numpy(), low, high),
        },
    )
