import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from background.schema import BackgroundModel
from core.schema import SourceSet
from plume.schema import PlumeGeometry

MOVES = ("locations", "widths", "rates", "sigma", "background", "bias", "angles", "birth", "death", "split", "coalesce")


class Priors(BaseModel):
    """
    Independent uniform priors on source parameters plus the scalar priors.

    Locations are uniform on the east and north ranges, half widths on [0, width_max] and
    rates on [0, rate_max]. sigma and the opening angles are log-uniform on their ranges,
    the wind bias uniform on (-pi, pi] and m uniform on {0, ..., m_max}.
    """
    model_config = ConfigDict(frozen=True)

    east_range: Tuple[float, float]
    north_range: Tuple[float, float]
    width_max: float = Field(1000.0, gt=0.0)
    rate_max: float = Field(1.0, gt=0.0)
    sigma_range: Tuple[float, float] = (0.01, 1000.0)
    angle_range: Tuple[float, float] = (math.radians(5.0), math.radians(30.0))
    m_max: int = Field(30, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("east_range", "north_range", "sigma_range", "angle_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be a non-empty interval")
        if self.sigma_range[0] <= 0:
            raise ValueError("sigma range must be positive")
        if not (0 < self.angle_range[0] and self.angle_range[1] < math.pi / 2):
            raise ValueError("opening angle range must lie in (0, pi/2)")
        return self

    @property
    def source_volume(self) -> float:
        """R_z1 R_z2 R_w R_s."""
        return (
            (self.east_range[1] - self.east_range[0])
            * (self.north_range[1] - self.north_range[0])
            * self.width_max
            * self.rate_max
        )

    def in_domain(self, locations: np.ndarray) -> np.ndarray:
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        return (
            (locations[:, 0] >= self.east_range[0])
            & (locations[:, 0] <= self.east_range[1])
            & (locations[:, 1] >= self.north_range[0])
            & (locations[:, 1] <= self.north_range[1])
        )

    def in_support(self, locations, widths, rates) -> bool:
        widths = np.asarray(widths, dtype=float)
        rates = np.asarray(rates, dtype=float)
        return bool(
            np.all(self.in_domain(locations))
            and np.all((widths >= 0) & (widths <= self.width_max))
            and np.all((rates >= 0) & (rates <= self.rate_max))
        )

    def draw_source(self, rng: np.random.Generator) -> Tuple[np.ndarray, float, float]:
        location = np.array([rng.uniform(*self.east_range), rng.uniform(*self.north_range)])
        return location, rng.uniform(0.0, self.width_max), rng.uniform(0.0, self.rate_max)


class ProposalScales(BaseModel):
    """
    Random-walk standard deviations and split draw widths E.
    """
    model_config = ConfigDict(frozen=True)

    location: float = Field(250.0, gt=0.0)  # m
    width: float = Field(20.0, gt=0.0)  # m
    rate: float = Field(0.01, gt=0.0)  # m3/s
    log_sigma: float = Field(0.1, gt=0.0)
    bias: float = Field(math.radians(0.5), gt=0.0)  # rad
    log_angle: float = Field(0.05, gt=0.0)
    split_location: float = Field(500.0, gt=0.0)  # E_z1 = E_z2
    split_width: float = Field(40.0, gt=0.0)  # E_w
    split_rate: float = Field(0.02, gt=0.0)  # E_s

    @classmethod
    def from_steps(cls, location: float, width: float, rate: float, **kwargs) -> "ProposalScales":
        """Scales whose split widths default to twice the matching random-walk step."""
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        kwargs.setdefault("split_location", 2.0 * location)
        kwargs.setdefault("split_width", 2.0 * width)
        kwargs.setdefault("split_rate", 2.0 * rate)
        return cls(location=location, width=width, rate=rate, **kwargs)

    @property
    def split_widths(self) -> np.ndarray:
        """(E_z1, E_z2, E_w, E_s)."""
        return np.array([self.split_location, self.split_location, self.split_width, self.split_rate])


class Schedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(13000, ge=1)
    burn_in: int = Field(3000, ge=0)
    thin: int = Field(1, ge=1)
    background_thin: int = Field(10, ge=1)
    audit_every: int = Field(1000, ge=1)
    log_every: int = Field(500, ge=1)
    sample_bias: bool = True
    sample_angles: bool = False

    @model_validator(mode="after")
    def _check_burn_in(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        return self

    @property
    def snapshots(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass(frozen=True)
class Target:
    """
    Everything the posterior depends on apart from the chain state.

    ``coupling_scale`` converts plume coupling (s/m3) into ppb per m3/s.
    """
    positions: np.ndarray  # (n, 3)
    wind: np.ndarray  # (n, 2) recorded wind, before bias
    concentrations: np.ndarray  # (n,) ppb
    background: BackgroundModel
    priors: Priors
    geometry: PlumeGeometry = field(default_factory=PlumeGeometry)
    source_height: float = 0.0
    use_likelihood: bool = True
    sample_bias: bool = True
    sample_angles: bool = False
    coupling_scale: float = 1e9

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class ChainState:
    """
    One point of the chain with its cached coupling matrix and log posterior.
    """
    locations: np.ndarray  # (m, 2)
    widths: np.ndarray  # (m,)
    rates: np.ndarray  # (m,)
    beta: np.ndarray  # (r,)
    sigma: float
    bias: float
    angle_h: float
    angle_v: float
    coupling: np.ndarray  # (n, m), ppb per m3/s
    log_posterior: float = -np.inf

    @property
    def m(self) -> int:
        return int(self.rates.shape[0])

    def sources(self, height: float = 0.0) -> SourceSet:
        return SourceSet.from_arrays(self.locations, self.widths, self.rates, height)

    def geometry(self, base: PlumeGeometry) -> PlumeGeometry:
        return base.model_copy(update={"wind_bias": self.bias, "opening_angle_h": self.angle_h, "opening_angle_v": self.angle_v})

    def evolve(self, **changes) -> "ChainState":
        return replace(self, **changes)

    def source_matrix(self) -> np.ndarray:
        """(m, 4) rows of (east, north, half width, rate)."""
        return np.column_stack([self.locations.reshape(-1, 2), self.widths, self.rates])


class AcceptanceTally:
    """Proposed and accepted counts per move type."""

    def __init__(self) -> None:
        self.proposed: Dict[str, int] = OrderedDict((move, 0) for move in MOVES)
        self.accepted: Dict[str, int] = OrderedDict((move, 0) for move in MOVES)

    def record(self, move: str, accepted: bool) -> None:
        self.proposed[move] += 1
        self.accepted[move] += int(accepted)

    def rate(self, move: str) -> float:
        return self.accepted[move] / self.proposed[move] if self.proposed[move] else float("nan")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "move": list(self.proposed),
            "proposed": list(self.proposed.values()),
            "accepted": list(self.accepted.values()),
            "rate": [self.rate(move) for move in self.proposed],
        })


@dataclass
class TraceTables:
    """
    Tabular form of one or more chains, as written to and read from disk.
    """
    scalars: pd.DataFrame
    sources: pd.DataFrame
    background: pd.DataFrame
    residuals: pd.DataFrame
    acceptance: pd.DataFrame


@dataclass
class ChainTrace:
    """
    Post burn-in snapshots of a single chain plus its acceptance tally.
    """
    chain: int = 0
    scalars: List[dict] = field(default_factory=list)
    sources: List[dict] = field(default_factory=list)
    background: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    residuals: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    tally: AcceptanceTally = field(default_factory=AcceptanceTally)
    completed: bool = False

    @property
    def snapshots(self) -> int:
        return len(self.scalars)

    def record(self, iteration: int, state: ChainState, background: Optional[np.ndarray], residual: Optional[np.ndarray]) -> None:
        snapshot = len(self.scalars)
        self.scalars.append({
            "snapshot": snapshot,
            "iteration": iteration,
            "m": state.m,
            "sigma_ppb": state.sigma,
            "bias_deg": math.degrees(state.bias),
            "angle_h_deg": math.degrees(state.angle_h),
            "angle_v_deg": math.degrees(state.angle_v),
            "total_rate_m3s": float(np.sum(state.rates)),
            "log_posterior": state.log_posterior,
        })
        for j in range(state.m):
            self.sources.append({
                "snapshot": snapshot,
                "iteration": iteration,
                "east_m": float(state.locations[j, 0]),
                "north_m": float(state.locations[j, 1]),
                "half_width_m": float(state.widths[j]),
                "rate_m3s": float(state.rates[j]),
            })
        if background is not None:
            self.background.append((snapshot, iteration, background))
        if residual is not None:
            self.residuals.append((snapshot, iteration, residual))

    @staticmethod
    def _long(rows: List[Tuple[int, int, np.ndarray]]) -> pd.DataFrame:
        if not rows:
            return pd.DataFrame({"snapshot": [], "iteration": [], "measurement": [], "value_ppb": []})
        return pd.DataFrame({
            "snapshot": np.concatenate([np.full(v.shape[0], s) for s, _, v in rows]),
            "iteration": np.concatenate([np.full(v.shape[0], it) for _, it, v in rows]),
            "measurement": np.concatenate([np.arange(v.shape[0]) for _, _, v in rows]),
            "value_ppb": np.concatenate([v for _, _, v in rows]),
        })

    def tables(self) -> TraceTables:
        scalars = pd.DataFrame(self.scalars, columns=[
            "snapshot", "iteration", "m", "sigma_ppb", "bias_deg", "angle_h_deg", "angle_v_deg", "total_rate_m3s", "log_posterior",
        ])
        sources = pd.DataFrame(self.sources, columns=["snapshot", "iteration", "east_m", "north_m", "half_width_m", "rate_m3s"])
        frames = [scalars, sources, self._long(self.background), self._long(self.residuals), self.tally.frame()]
        for frame in frames:
            frame.insert(0, "chain", self.chain)
        return TraceTables(*frames)
