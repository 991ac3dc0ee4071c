import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator


class PlumeGeometry(BaseModel):
    """
    Wind-field geometry shared by every source in a coupling evaluation.
    """
    model_config = ConfigDict(frozen=True)

    opening_angle_h: float = math.radians(12.7)  # gamma_H, radians
    opening_angle_v: float = math.radians(12.7)  # gamma_V, radians
    abl_depth: float = Field(400.0, gt=0.0)  # D, meters
    wind_bias: float = 0.0  # omega, radians, added counter-clockwise to the wind direction
    image_terms: int = Field(16, ge=2)

    @field_validator("opening_angle_h", "opening_angle_v")
    @classmethod
    def _open_angle(cls, value):
        if not 0.0 < value < math.pi / 2:
            raise ValueError("opening angles must lie in (0, pi/2)")
        return value


# Dense (n, m) matrix of couplings in s/m3; every entry finite and non-negative.
CouplingMatrix = np.ndarray
