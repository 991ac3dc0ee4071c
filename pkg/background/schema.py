from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class LinkKind(str, Enum):
    ADJACENT = "adjacent"
    WIND = "wind"


class MrfSpec(BaseModel):
    """
    Graph and link-strength constants of the Gauss-Markov random field background.
    """
    model_config = ConfigDict(frozen=True)

    c_t: float = Field(0.005, gt=0.0)  # ppb per second
    c_d: float = Field(0.0005, gt=0.0)  # ppb per meter
    edges: Tuple[Tuple[int, int, LinkKind], ...] = ()

    @field_validator("edges")
    @classmethod
    def _no_self_edges(cls, value):
        for i, j, kind in value:
            if i == j:
                raise ValueError(f"self edge at {i}")
            if kind == LinkKind.ADJACENT and abs(i - j) != 1:
                raise ValueError(f"adjacent edge ({i}, {j}) does not join consecutive measurements")
        return value

    @property
    def wind_links(self) -> List[Tuple[int, int]]:
        return [(i, j) for i, j, kind in self.edges if kind == LinkKind.WIND]


@dataclass(frozen=True)
class SparsePrecision:
    """
    Symmetric positive semi-definite precision J together with a factor R such that J = R^T R.
    """
    matrix: sp.csr_matrix
    root: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def quadratic(self, x: np.ndarray) -> float:
        return float(x @ (self.matrix @ x))


class ChebySpec(BaseModel):
    """
    Tensor-product Chebyshev (second kind) background over (east, north, altitude, time).
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    degrees: Tuple[int, int, int, int] = (2, 2, 0, 2)
    lower: Tuple[float, float, float, float]
    upper: Tuple[float, float, float, float]
    mu1: float = Field(1e-6, ge=0.0)  # reference-level weight
    mu2: float = Field(1.0, ge=0.0)  # curvature weight
    mu3: float = Field(1.0, ge=0.0)  # transport weight
    b0: float = 1800.0  # reference level, ppb
    grid: np.ndarray  # (g, 4) collocation points in survey coordinates
    grid_wind: np.ndarray  # (g, 2) wind vectors at the collocation points

    @field_validator("degrees")
    @classmethod
    def _non_negative(cls, value):
        if any(d < 0 for d in value):
            raise ValueError("degrees must be >= 0")
        return value

    @model_validator(mode="after")
    def _check_box(self):
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("domain box is degenerate")
        if self.grid.ndim != 2 or self.grid.shape[1] != 4 or self.grid.shape[0] == 0:
            raise ValueError("collocation grid must be a non-empty (g, 4) array")
        if self.grid_wind.shape != (self.grid.shape[0], 2):
            raise ValueError("grid wind must be (g, 2)")
        return self

    @property
    def scale(self) -> np.ndarray:
        """d(mapped)/d(physical) per axis."""
        return 2.0 / (np.asarray(self.upper) - np.asarray(self.lower))

    @property
    def size(self) -> int:
        return int(np.prod([d + 1 for d in self.degrees]))

    def to_unit(self, coords: np.ndarray) -> np.ndarray:
        lower = np.asarray(self.lower)
        return (np.asarray(coords, dtype=float) - lower) * self.scale - 1.0


@dataclass(frozen=True)
class BackgroundModel:
    """
    Background b = P beta with Gaussian prior exp{-mu/2 (beta - beta0)^T J (beta - beta0)}.
    """
    kind: str
    basis: sp.csr_matrix  # P, (n, r)
    beta: np.ndarray  # (r,)
    beta0: np.ndarray  # (r,)
    precision: SparsePrecision
    mu: float = 1.0
    edges: Tuple = field(default=())

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def r(self) -> int:
        return self.basis.shape[1]

    def evaluate(self, beta: np.ndarray = None) -> np.ndarray:
        return self.basis @ (self.beta if beta is None else beta)

    def penalty(self, beta: np.ndarray) -> float:
        """mu/2 (beta - beta0)^T J (beta - beta0)."""
        return 0.5 * self.mu * self.precision.quadratic(beta - self.beta0)

    def with_beta(self, beta: np.ndarray) -> "BackgroundModel":
        return BackgroundModel(self.kind, self.basis, np.asarray(beta, dtype=float), self.beta0, self.precision, self.mu, self.edges)

    def with_mu(self, mu: float) -> "BackgroundModel":
        return BackgroundModel(self.kind, self.basis, self.beta, self.beta0, self.precision, float(mu), self.edges)

    def negative_entries(self, beta: np.ndarray = None) -> int:
        return int(np.sum(self.evaluate(beta) < 0))
