"""
Gaussian plume coupling with ground and boundary-layer reflections.
"""
import numpy as np

from core.geometry import downwind_frame, downwind_offsets, rotate
from core.schema import Measurement, Source, SourceSet, Survey
from plume.schema import CouplingMatrix, PlumeGeometry

NEAR_FIELD_SIGMA_V = 0.1  # m
IMAGE_TOLERANCE = 1e-12


def coupling_field(along, across, vertical, half_width, height, speed, tan_h, tan_v, abl_depth, image_terms=16):
    """
    Evaluate the plume coupling on broadcastable arrays of frame offsets.

    Reflections are summed as image sources at vertical offsets delta_V -/+ (2kD +/- H) for
    k = 0 .. image_terms - 1. The loop stops early once a whole image group adds less than
    IMAGE_TOLERANCE of the running sum everywhere and every later group lies further away.

    Args:
        along: Downwind distance delta_R (m).
        across: Crosswind offset delta_H (m).
        vertical: Measurement altitude delta_V (m).
        half_width: Source half width w (m).
        height: Source height H (m).
        speed: Wind speed |U| (m/s).
        tan_h: tan(gamma_H).
        tan_v: tan(gamma_V).
        abl_depth (float): Boundary-layer depth D (m).
        image_terms (int): Number of reflection groups.

    Returns:
        np.ndarray: Coupling in s/m3, exactly zero where delta_R <= 0.
    """
    along, across, vertical, half_width, height, speed, tan_h, tan_v = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (along, across, vertical, half_width, height, speed, tan_h, tan_v))
    )
    out = np.zeros(along.shape)
    downwind = along > 0
    if not downwind.any():
        return out

    r = along[downwind]
    h = across[downwind]
    v = vertical[downwind]
    source_height = height[downwind]
    sigma_h = r * tan_h[downwind] + half_width[downwind]
    sigma_v = np.maximum(r * tan_v[downwind], NEAR_FIELD_SIGMA_V)
    two_var = 2.0 * sigma_v ** 2

    images = np.exp(-(v - source_height) ** 2 / two_var) + np.exp(-(v + source_height) ** 2 / two_var)
    for k in range(1, image_terms):
        shift = 2.0 * k * abl_depth
        group = (
            np.exp(-(v - shift - source_height) ** 2 / two_var)
            + np.exp(-(v - shift + source_height) ** 2 / two_var)
            + np.exp(-(v + shift + source_height) ** 2 / two_var)
            + np.exp(-(v + shift - source_height) ** 2 / two_var)
        )
        images += group
        receding = shift >= np.max(v + source_height)
        if receding and np.all(group <= IMAGE_TOLERANCE * images):
            break

    lateral = np.exp(-h ** 2 / (2.0 * sigma_h ** 2))
    out[downwind] = lateral * images / (2.0 * np.pi * speed[downwind] * sigma_h * sigma_v)
    return out


def plume_columns(positions, wind, locations, half_widths, heights, geom: PlumeGeometry) -> np.ndarray:
    """
    Coupling between every measurement and every source location.

    Args:
        positions: (n, 3) measurement coordinates.
        wind: (n, 2) recorded wind vectors; ``geom.wind_bias`` is applied here.
        locations: (m, 2) source locations.
        half_widths: (m,) source half widths.
        heights: (m,) source heights.
        geom (PlumeGeometry): Opening angles, boundary-layer depth, bias and image count.

    Returns:
        np.ndarray: (n, m) coupling matrix in s/m3.
    """
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    n = np.asarray(positions).shape[0]
    if locations.shape[0] == 0:
        return np.zeros((n, 0))
    rotated = rotate(wind, geom.wind_bias) if geom.wind_bias else np.asarray(wind, dtype=float)
    along, across, vertical = downwind_offsets(positions, rotated, locations)
    speed = np.hypot(rotated[:, 0], rotated[:, 1])[:, None]
    return coupling_field(
        along,
        across,
        vertical,
        np.asarray(half_widths, dtype=float)[None, :],
        np.asarray(heights, dtype=float)[None, :],
        speed,
        np.tan(geom.opening_angle_h),
        np.tan(geom.opening_angle_v),
        geom.abl_depth,
        geom.image_terms,
    )


def coupling(measurement: Measurement, source: Source, geom: PlumeGeometry) -> float:
    """
    Coupling between one measurement and one source, in s/m3.

    Args:
        measurement (Measurement): Measurement with its own wind vector.
        source (Source): Source location, half width and height.
        geom (PlumeGeometry): Plume geometry; the bias rotates the measurement wind.

    Returns:
        float: Concentration (volume fraction) per unit emission rate.
    """
    wind = rotate(np.asarray(measurement.wind, dtype=float), geom.wind_bias)
    along, across, vertical = downwind_frame(measurement.position, source, wind)
    speed = float(np.hypot(wind[0], wind[1]))
    value = coupling_field(
        along,
        across,
        vertical,
        source.half_width,
        source.height,
        speed,
        np.tan(geom.opening_angle_h),
        np.tan(geom.opening_angle_v),
        geom.abl_depth,
        geom.image_terms,
    )
    return float(value)


def build_matrix(survey: Survey, sources: SourceSet, geom: PlumeGeometry) -> CouplingMatrix:
    """
    Assemble the forward matrix A for a survey and a source set.

    Each row uses the measurement's own wind vector, rotated by the geometry's bias.

    Returns:
        CouplingMatrix: (n, m) matrix in s/m3.
    """
    return plume_columns(
        survey.positions,
        survey.wind,
        sources.locations(),
        sources.half_widths(),
        sources.heights(),
        geom,
    )
