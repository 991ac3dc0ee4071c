import math
from typing import Iterable, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Measurement(BaseModel):
    """
    One concentration sample along the trajectory.

    Positions are local planar meters (easting, northing, altitude above ground) and the
    wind is stored as the horizontal vector the air moves along, in m/s.
    """
    model_config = ConfigDict(frozen=True)

    time: float  # seconds since survey start
    position: Tuple[float, float, float]
    concentration: float  # ppb
    wind: Tuple[float, float]

    @field_validator("position")
    @classmethod
    def _altitude_above_ground(cls, value):
        if value[2] < 0:
            raise ValueError("altitude must be >= 0")
        return value

    @field_validator("concentration")
    @classmethod
    def _finite_concentration(cls, value):
        if not math.isfinite(value):
            raise ValueError("concentration must be finite")
        return value

    @field_validator("wind")
    @classmethod
    def _finite_wind(cls, value):
        if not all(math.isfinite(v) for v in value):
            raise ValueError("wind must be finite")
        return value

    @property
    def wind_speed(self) -> float:
        return math.hypot(*self.wind)


class Survey(BaseModel):
    """
    Ordered trajectory of measurements, stored column-wise as read-only arrays.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    times: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 3)
    concentrations: np.ndarray  # (n,)
    wind: np.ndarray  # (n, 2)

    @field_validator("times", "positions", "concentrations", "wind", mode="before")
    @classmethod
    def _as_array(cls, value):
        array = np.array(value, dtype=float)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_shapes(self):
        n = self.times.shape[0]
        if self.times.ndim != 1 or n < 2:
            raise ValueError("a survey needs at least two measurements")
        if self.positions.shape != (n, 3) or self.concentrations.shape != (n,) or self.wind.shape != (n, 2):
            raise ValueError("survey columns have inconsistent shapes")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("measurement times must be strictly increasing")
        if np.any(self.positions[:, 2] < 0):
            raise ValueError("altitude must be >= 0")
        if not np.all(np.isfinite(self.concentrations)):
            raise ValueError("concentrations must be finite")
        if not np.all(np.isfinite(self.wind)) or not np.all(np.isfinite(self.positions)):
            raise ValueError("positions and wind must be finite")
        return self

    @classmethod
    def from_measurements(cls, measurements: Sequence[Measurement]) -> "Survey":
        return cls(
            times=[m.time for m in measurements],
            positions=[m.position for m in measurements],
            concentrations=[m.concentration for m in measurements],
            wind=[m.wind for m in measurements],
        )

    @property
    def n(self) -> int:
        return int(self.times.shape[0])

    @property
    def wind_speed(self) -> np.ndarray:
        return np.hypot(self.wind[:, 0], self.wind[:, 1])

    @property
    def measurements(self) -> list:
        return [
            Measurement(
                time=float(self.times[i]),
                position=tuple(float(v) for v in self.positions[i]),
                concentration=float(self.concentrations[i]),
                wind=tuple(float(v) for v in self.wind[i]),
            )
            for i in range(self.n)
        ]

    def with_concentrations(self, concentrations: np.ndarray) -> "Survey":
        return Survey(times=self.times, positions=self.positions, concentrations=concentrations, wind=self.wind)

    def subset(self, index: Iterable[int]) -> "Survey":
        index = np.asarray(list(index), dtype=int)
        return Survey(
            times=self.times[index],
            positions=self.positions[index],
            concentrations=self.concentrations[index],
            wind=self.wind[index],
        )


class Source(BaseModel):
    """
    Ground source represented as a two-dimensional Gaussian kernel.
    """
    model_config = ConfigDict(frozen=True)

    location: Tuple[float, float]
    half_width: float = Field(0.0, ge=0.0)  # kernel standard deviation, m
    emission_rate: float = Field(0.0, ge=0.0)  # m3/s of pure gas
    height: float = Field(0.0, ge=0.0)  # m above ground


class SourceSet(BaseModel):
    """
    Variable-length collection of sources with array views for the numerical code.
    """
    model_config = ConfigDict(frozen=True)

    sources: Tuple[Source, ...] = ()

    @classmethod
    def from_arrays(cls, locations, half_widths, rates, heights=None) -> "SourceSet":
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        m = locations.shape[0]
        heights = np.zeros(m) if heights is None else np.broadcast_to(np.asarray(heights, dtype=float), (m,))
        half_widths = np.broadcast_to(np.asarray(half_widths, dtype=float), (m,))
        rates = np.broadcast_to(np.asarray(rates, dtype=float), (m,))
        return cls(sources=tuple(
            Source(
                location=(float(locations[j, 0]), float(locations[j, 1])),
                half_width=float(half_widths[j]),
                emission_rate=float(rates[j]),
                height=float(heights[j]),
            )
            for j in range(m)
        ))

    @property
    def m(self) -> int:
        return len(self.sources)

    def locations(self) -> np.ndarray:
        return np.array([s.location for s in self.sources], dtype=float).reshape(-1, 2)

    def half_widths(self) -> np.ndarray:
        return np.array([s.half_width for s in self.sources], dtype=float)

    def rates(self) -> np.ndarray:
        return np.array([s.emission_rate for s in self.sources], dtype=float)

    def heights(self) -> np.ndarray:
        return np.array([s.height for s in self.sources], dtype=float)

    def check_capacity(self, m_max: int) -> None:
        if self.m > m_max:
            raise ValueError(f"{self.m} sources exceed the upper bound {m_max}")


class UnitConvention:
    """
    Conversion between coupling units and reported concentrations.

    Coupling is in s/m3, so coupling times an emission rate in m3/s is a volume fraction;
    concentration_ppb = 1e9 * sum_j a_ij s_j + background_ppb.
    """
    COUPLING_UNITS = "s/m3"
    PPB = 1e9

    @classmethod
    def to_ppb(cls, fraction):
        return cls.PPB * np.asarray(fraction, dtype=float)

    @classmethod
    def predict(cls, coupling: np.ndarray, rates: np.ndarray, background: np.ndarray) -> np.ndarray:
        return cls.PPB * (np.asarray(coupling) @ np.asarray(rates)) + np.asarray(background)
