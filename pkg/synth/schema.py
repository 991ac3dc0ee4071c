from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.config import PlumeConfig, SynthConfig
from core.geometry import wind_to_meteorological
from core.schema import SourceSet


class ScenarioSpec(BaseModel):
    """
    Synthetic survey: random ground sources, a random-walk wind field and a serpentine flight.
    """
    model_config = ConfigDict(frozen=True)

    domain: Tuple[float, float] = (40000.0, 40000.0)  # east, north extent, m
    source_count: int = Field(10, ge=0)
    source_rate: float = Field(0.1, ge=0.0)  # m3/s
    source_half_width: float = Field(100.0, ge=0.0)  # m
    source_height: float = Field(0.0, ge=0.0)  # m
    min_peak_ppb: float = Field(1.0, ge=0.0)
    wind_speed_range: Tuple[float, float] = (6.3, 6.6)  # m/s
    wind_speed_step: float = Field(0.02, ge=0.0)
    wind_dir_range: Tuple[float, float] = (218.0, 222.0)  # meteorological degrees
    wind_dir_step: float = Field(0.2, ge=0.0)
    angle_range: Tuple[float, float] = (11.5, 13.9)  # degrees
    angle_step: float = Field(0.1, ge=0.0)
    duration: float = Field(4140.0, gt=0.0)  # s
    interval: float = Field(3.0, gt=0.0)  # s
    altitude: float = Field(200.0, ge=0.0)  # m
    aircraft_speed: float = Field(50.0, gt=0.0)  # m/s
    leg_count: int = Field(5, ge=1)
    background_ppb: float = 1800.0
    noise_ppb: float = Field(3.0, ge=0.0)
    wind_bias_deg: float = 0.0
    abl_depth: float = Field(400.0, gt=0.0)
    image_terms: int = Field(16, ge=2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("wind_speed_range", "wind_dir_range", "angle_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty")
        if self.domain[0] <= 0 or self.domain[1] <= 0:
            raise ValueError("domain must have positive extent")
        if not (0 < self.angle_range[0] and self.angle_range[1] < 90):
            raise ValueError("opening angles must lie in (0, 90) degrees")
        return self

    @property
    def sample_count(self) -> int:
        """Samples at interval, 2 interval, ... strictly before the end of the flight."""
        return int(np.ceil(self.duration / self.interval)) - 1

    @classmethod
    def from_config(cls, synth: SynthConfig, plume: PlumeConfig, seed: int = 0) -> "ScenarioSpec":
        return cls(
            domain=(synth.domain_east_m, synth.domain_north_m),
            source_count=synth.source_count,
            source_rate=synth.source_rate,
            source_half_width=synth.source_half_width_m,
            source_height=plume.source_height_m,
            min_peak_ppb=synth.min_peak_ppb,
            wind_speed_range=(synth.wind_speed_min_ms, synth.wind_speed_max_ms),
            wind_speed_step=synth.wind_speed_step_ms,
            wind_dir_range=(synth.wind_dir_min_deg, synth.wind_dir_max_deg),
            wind_dir_step=synth.wind_dir_step_deg,
            angle_range=(synth.angle_min_deg, synth.angle_max_deg),
            angle_step=synth.angle_step_deg,
            duration=synth.duration_s,
            interval=synth.interval_s,
            altitude=synth.altitude_m,
            aircraft_speed=synth.aircraft_speed_ms,
            leg_count=synth.leg_count,
            background_ppb=synth.background_ppb,
            noise_ppb=synth.noise_ppb,
            wind_bias_deg=synth.wind_bias_deg,
            abl_depth=plume.abl_depth_m,
            image_terms=plume.image_terms,
            seed=seed,
        )


@dataclass(frozen=True)
class GroundTruth:
    """
    What generated a synthetic survey.

    ``wind`` is the true wind; the survey records it rotated by minus the bias.
    """
    sources: SourceSet
    times: np.ndarray
    wind: np.ndarray  # (n, 2) true wind vectors
    angle_h_deg: np.ndarray  # (n,)
    angle_v_deg: np.ndarray  # (n,)
    background: np.ndarray  # (n,) ppb
    noiseless: np.ndarray  # (n,) ppb
    wind_bias_deg: float = 0.0

    def series_frame(self) -> pd.DataFrame:
        speed, direction = wind_to_meteorological(self.wind)
        return pd.DataFrame({
            "time_s": self.times,
            "true_wind_speed_ms": speed,
            "true_wind_dir_deg_met": direction,
            "angle_h_deg": self.angle_h_deg,
            "angle_v_deg": self.angle_v_deg,
            "background_ppb": self.background,
            "noiseless_ppb": self.noiseless,
        })


class SourceMatch(BaseModel):
    truth_index: int
    estimate_index: int
    location_error_m: float
    true_rate_m3s: float
    estimated_rate_m3s: float
    rate_error: Optional[float]  # relative, None for a zero true rate


class ScoreReport(BaseModel):
    match_radius_m: float
    hits: int
    misses: int
    spurious: int
    matches: List[SourceMatch] = []

    @property
    def max_rate_error(self) -> float:
        errors = [m.rate_error for m in self.matches if m.rate_error is not None]
        return max(errors) if errors else 0.0

    @property
    def mean_location_error_m(self) -> float:
        return float(np.mean([m.location_error_m for m in self.matches])) if self.matches else 0.0
