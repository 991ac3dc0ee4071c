from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from background.schema import BackgroundModel
from core.schema import SourceSet


class SourceGrid(BaseModel):
    """
    Regular grid of candidate ground sources, one per cell centre.

    Cells are numbered row-major over (north row, east column).
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    origin: Tuple[float, float] = (0.0, 0.0)  # south-west corner, m
    cell_size: float = Field(1000.0, gt=0.0)
    nx: int = Field(40, ge=1)
    ny: int = Field(40, ge=1)
    rates: Optional[np.ndarray] = None  # (nx * ny,), m3/s

    @field_validator("rates", mode="before")
    @classmethod
    def _as_array(cls, value):
        if value is None:
            return None
        array = np.array(value, dtype=float).ravel()
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_rates(self):
        if self.rates is not None:
            if self.rates.shape != (self.m,):
                raise ValueError(f"expected {self.m} cell rates, got {self.rates.shape[0]}")
            if np.any(self.rates < 0):
                raise ValueError("cell rates must be non-negative")
        return self

    @property
    def m(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        east, north = self.origin
        return (east, east + self.nx * self.cell_size), (north, north + self.ny * self.cell_size)

    def cell_centers(self) -> np.ndarray:
        col, row = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        east = self.origin[0] + (col.ravel() + 0.5) * self.cell_size
        north = self.origin[1] + (row.ravel() + 0.5) * self.cell_size
        return np.column_stack([east, north])

    def cell_index(self, points) -> np.ndarray:
        """
        Cell containing each point, or -1 for points off the grid.

        Args:
            points: (k, 2) ground coordinates.

        Returns:
            np.ndarray: (k,) integer cell indices.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        col = np.floor((points[:, 0] - self.origin[0]) / self.cell_size).astype(int)
        row = np.floor((points[:, 1] - self.origin[1]) / self.cell_size).astype(int)
        inside = (col >= 0) & (col < self.nx) & (row >= 0) & (row < self.ny)
        return np.where(inside, row * self.nx + col, -1)

    def as_sources(self, height: float = 0.0) -> SourceSet:
        rates = np.zeros(self.m) if self.rates is None else self.rates
        return SourceSet.from_arrays(self.cell_centers(), 0.5 * self.cell_size, rates, height)

    def with_rates(self, rates) -> "SourceGrid":
        return SourceGrid(origin=self.origin, cell_size=self.cell_size, nx=self.nx, ny=self.ny, rates=rates)

    def spec(self) -> dict:
        return {
            "origin_east_m": self.origin[0],
            "origin_north_m": self.origin[1],
            "cell_size_m": self.cell_size,
            "nx": self.nx,
            "ny": self.ny,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "SourceGrid":
        return cls(
            origin=(float(spec["origin_east_m"]), float(spec["origin_north_m"])),
            cell_size=float(spec["cell_size_m"]),
            nx=int(spec["nx"]),
            ny=int(spec["ny"]),
        )


class OptimizerConfig(BaseModel):
    """
    Weights, bounds and iteration controls of the alternating initial estimate.

    Unset ``mu``, ``lam`` and ``tau`` are filled in by ``calibrate_weights``.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sigma: float = Field(3.0, gt=0.0)  # ppb
    mu: Optional[float] = Field(None, ge=0.0)
    lam: Optional[float] = Field(None, ge=0.0)
    q: Optional[np.ndarray] = None  # diagonal of Q, defaults to ones
    tau: Optional[float] = Field(None, ge=0.0)  # ppb
    s_max: float = Field(10.0, gt=0.0)  # m3/s
    eta: float = Field(1.0, gt=0.0)
    max_outer: int = Field(200, ge=1)
    tol: float = Field(1e-8, gt=0.0)
    background_max_iter: int = Field(50, ge=1)
    newton_max_iter: int = Field(50, ge=1)
    sources_max_iter: int = Field(5000, ge=1)
    sources_tol: float = Field(1e-8, gt=0.0)
    feasibility_tol: float = Field(1e-7, gt=0.0)

    @field_validator("q", mode="before")
    @classmethod
    def _non_negative_q(cls, value):
        if value is None:
            return None
        value = np.asarray(value, dtype=float)
        if np.any(value < 0):
            raise ValueError("Q weights must be non-negative")
        return value

    def weights(self, m: int) -> np.ndarray:
        return np.ones(m) if self.q is None else np.broadcast_to(self.q, (m,))


@dataclass
class OptimizerResult:
    """
    Outcome of the alternating solve.

    ``objective_trace`` holds the objective after every outer iteration.
    """
    grid: SourceGrid
    beta: np.ndarray
    background: BackgroundModel
    objective_trace: List[float]
    residual: np.ndarray  # y - (A s + P beta), ppb
    lam: float
    mu: float
    tau: float
    converged: bool = True
    warnings: List[str] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objective_trace)

    @property
    def rates(self) -> np.ndarray:
        return self.grid.rates

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "objective": self.objective_trace[-1] if self.objective_trace else None,
            "converged": self.converged,
            "warnings": list(self.warnings),
            "lam": self.lam,
            "mu": self.mu,
            "tau": self.tau,
            "nonzero_cells": int(np.sum(self.grid.rates > 0)),
            "total_rate_m3s": float(np.sum(self.grid.rates)),
            "residual_rms_ppb": float(np.sqrt(np.mean(self.residual ** 2))),
        }
