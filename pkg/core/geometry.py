"""
Planar geometry shared by the plume, background and sampler packages.

Wind is always handled as the vector the air moves along ("to" direction). The
meteorological convention (direction the wind blows from, clockwise from north)
is converted once, at ingestion.
"""
from typing import Tuple

import numpy as np

from core.exceptions import DegenerateFrameError
from core.schema import Source


def wind_from_meteorological(speed, direction_deg) -> np.ndarray:
    """
    Convert speed and meteorological direction to east/north wind vectors.

    Args:
        speed: Wind speed in m/s, scalar or array.
        direction_deg: Direction the wind blows from, degrees clockwise from north.

    Returns:
        np.ndarray: Vectors of shape (..., 2) pointing where the air moves to.
    """
    speed = np.asarray(speed, dtype=float)
    theta = np.deg2rad(np.asarray(direction_deg, dtype=float))
    return np.stack([-speed * np.sin(theta), -speed * np.cos(theta)], axis=-1)


def wind_to_meteorological(wind) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverse of :func:`wind_from_meteorological`.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Speed (m/s) and from-direction in [0, 360) degrees.
    """
    wind = np.asarray(wind, dtype=float)
    speed = np.hypot(wind[..., 0], wind[..., 1])
    direction = np.mod(np.rad2deg(np.arctan2(-wind[..., 0], -wind[..., 1])), 360.0)
    return speed, direction


def rotate(vectors, angle) -> np.ndarray:
    """Rotate 2-D vectors counter-clockwise by ``angle`` radians (broadcasts over rows)."""
    vectors = np.asarray(vectors, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    x, y = vectors[..., 0], vectors[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def wrap_angle(angle):
    """Wrap radians into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2.0 * np.pi)


def downwind_offsets(positions, wind, locations) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Express every measurement position in the wind frame of every source.

    Args:
        positions: (n, 3) measurement coordinates.
        wind: (n, 2) wind vectors at the measurements, already bias-rotated.
        locations: (m, 2) source ground coordinates.

    Returns:
        Tuple of (n, m) arrays: along-wind distance, crosswind offset, altitude.

    Raises:
        DegenerateFrameError: If any wind vector has zero length.
    """
    positions = np.asarray(positions, dtype=float)
    wind = np.asarray(wind, dtype=float)
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    speed = np.hypot(wind[:, 0], wind[:, 1])
    if np.any(speed <= 0):
        raise DegenerateFrameError("wind speed must be positive to define a downwind frame")
    ux = (wind[:, 0] / speed)[:, None]
    uy = (wind[:, 1] / speed)[:, None]
    dx = positions[:, 0:1] - locations[None, :, 0]
    dy = positions[:, 1:2] - locations[None, :, 1]
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    vertical = np.broadcast_to(positions[:, 2:3], along.shape)
    return along, across, vertical


def downwind_frame(measurement_position, source: Source, wind) -> Tuple[float, float, float]:
    """
    Scalar form of :func:`downwind_offsets` for one measurement and one source.

    Args:
        measurement_position: (east, north, altitude) in meters.
        source (Source): Source whose ground point is the frame origin.
        wind: Horizontal wind vector in m/s, already bias-rotated.

    Returns:
        Tuple[float, float, float]: (delta_R, delta_H, delta_V) in meters.
    """
    along, across, vertical = downwind_offsets(
        np.asarray(measurement_position, dtype=float).reshape(1, 3),
        np.asarray(wind, dtype=float).reshape(1, 2),
        np.asarray(source.location, dtype=float).reshape(1, 2),
    )
    return float(along[0, 0]), float(across[0, 0]), float(vertical[0, 0])
