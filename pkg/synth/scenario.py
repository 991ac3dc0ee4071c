"""
Synthetic survey generation.
"""
import math
from typing import Tuple

import numpy as np
from loguru import logger

from core.geometry import downwind_offsets, rotate, wind_from_meteorological
from core.schema import SourceSet, Survey, UnitConvention
from plume.kernel import coupling_field
from synth.schema import GroundTruth, ScenarioSpec

MAX_PLACEMENT_ATTEMPTS = 10000
LEG_SPAN = (0.5, 0.95)  # fraction of the east extent covered by the legs
LEG_MARGIN = 0.05  # fraction of the north extent left clear at both ends


def reflect(values, lower: float, upper: float) -> np.ndarray:
    """Fold values back into [lower, upper] by reflection at both bounds."""
    values = np.asarray(values, dtype=float)
    width = upper - lower
    if width <= 0:
        return np.full(values.shape, lower)
    period = 2.0 * width
    folded = np.mod(values - lower, period)
    return lower + width - np.abs(folded - width)


def bounded_walk(rng: np.random.Generator, n: int, lower: float, upper: float, step: float) -> np.ndarray:
    """Gaussian random walk started uniformly in [lower, upper] and reflected at both bounds."""
    out = np.empty(n)
    value = rng.uniform(lower, upper) if upper > lower else lower
    for i in range(n):
        if i:
            value = float(reflect(value + rng.normal(0.0, step), lower, upper)) if step > 0 else value
        out[i] = value
    return out


def serpentine(spec: ScenarioSpec) -> np.ndarray:
    """Waypoints of north-south legs spread over the eastern part of the domain."""
    east, north = spec.domain
    if spec.leg_count == 1:
        columns = np.array([0.5 * (LEG_SPAN[0] + LEG_SPAN[1]) * east])
    else:
        columns = np.linspace(LEG_SPAN[0] * east, LEG_SPAN[1] * east, spec.leg_count)
    south, top = LEG_MARGIN * north, (1.0 - LEG_MARGIN) * north
    waypoints = []
    for leg, x in enumerate(columns):
        ends = (south, top) if leg % 2 == 0 else (top, south)
        waypoints += [(x, ends[0]), (x, ends[1])]
    return np.array(waypoints)


def flight_positions(spec: ScenarioSpec, times: np.ndarray) -> np.ndarray:
    """
    Aircraft positions along the serpentine at constant speed, flown back and forth.

    Returns:
        np.ndarray: (n, 3) positions at the survey altitude.
    """
    waypoints = serpentine(spec)
    legs = np.hypot(*np.diff(waypoints, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(legs)])
    total = arc[-1]
    distance = spec.aircraft_speed * np.asarray(times, dtype=float)
    if total > 0:
        distance = reflect(distance, 0.0, total)
    east = np.interp(distance, arc, waypoints[:, 0])
    north = np.interp(distance, arc, waypoints[:, 1])
    return np.column_stack([east, north, np.full(east.shape, spec.altitude)])


def truth_coupling(
    positions: np.ndarray,
    wind: np.ndarray,
    locations: np.ndarray,
    half_widths: np.ndarray,
    height: float,
    angle_h_deg: np.ndarray,
    angle_v_deg: np.ndarray,
    abl_depth: float,
    image_terms: int,
) -> np.ndarray:
    """Coupling (s/m3) with per-measurement opening angles."""
    along, across, vertical = downwind_offsets(positions, wind, locations)
    speed = np.hypot(wind[:, 0], wind[:, 1])[:, None]
    return coupling_field(
        along,
        across,
        vertical,
        np.asarray(half_widths, dtype=float)[None, :],
        height,
        speed,
        np.tan(np.radians(angle_h_deg))[:, None],
        np.tan(np.radians(angle_v_deg))[:, None],
        abl_depth,
        image_terms,
    )


def generate(spec: ScenarioSpec, rng: np.random.Generator = None) -> Tuple[Survey, GroundTruth]:
    """
    Simulate a survey.

    Sources are placed uniformly over the domain and redrawn while their peak contribution
    along the flight stays below ``min_peak_ppb``. Concentrations use the true wind and
    per-measurement opening angles; the survey records the wind rotated by minus the bias.

    Args:
        spec (ScenarioSpec): Scenario parameters.
        rng (np.random.Generator): Random stream, defaults to one seeded with ``spec.seed``.

    Returns:
        Tuple[Survey, GroundTruth]: Simulated survey and what produced it.

    Raises:
        ValueError: If a source cannot be placed where the flight sees it.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.sample_count
    if n < 2:
        raise ValueError("scenario yields fewer than two samples")
    times = spec.interval * np.arange(1, n + 1)
    positions = flight_positions(spec, times)
    speed = bounded_walk(rng, n, *spec.wind_speed_range, spec.wind_speed_step)
    direction = bounded_walk(rng, n, *spec.wind_dir_range, spec.wind_dir_step)
    angle_h = bounded_walk(rng, n, *spec.angle_range, spec.angle_step)
    angle_v = bounded_walk(rng, n, *spec.angle_range, spec.angle_step)
    wind = wind_from_meteorological(speed, direction)

    def column(location):
        return truth_coupling(
            positions, wind, np.asarray(location).reshape(1, 2), np.array([spec.source_half_width]),
            spec.source_height, angle_h, angle_v, spec.abl_depth, spec.image_terms,
        )[:, 0]

    locations = np.zeros((spec.source_count, 2))
    columns = np.zeros((n, spec.source_count))
    for j in range(spec.source_count):
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = rng.uniform((0.0, 0.0), spec.domain)
            values = column(candidate)
            if spec.source_rate == 0 or spec.source_rate * UnitConvention.to_ppb(values.max()) >= spec.min_peak_ppb:
                break
        else:
            raise ValueError(f"could not place source {j} within sight of the flight path")
        locations[j] = candidate
        columns[:, j] = values

    sources = SourceSet.from_arrays(locations, spec.source_half_width, spec.source_rate, spec.source_height)
    background = np.full(n, spec.background_ppb)
    noiseless = UnitConvention.predict(columns, sources.rates(), background)
    observed = noiseless + rng.normal(0.0, spec.noise_ppb, n)
    recorded_wind = rotate(wind, -math.radians(spec.wind_bias_deg)) if spec.wind_bias_deg else wind
    survey = Survey(times=times, positions=positions, concentrations=observed, wind=recorded_wind)
    logger.info(
        f"synthetic survey: {n} samples, {spec.source_count} sources, peak enhancement "
        f"{float(np.max(noiseless - background)) if n else 0.0:.2f} ppb"
    )
    truth = GroundTruth(
        sources=sources,
        times=times,
        wind=wind,
        angle_h_deg=angle_h,
        angle_v_deg=angle_v,
        background=background,
        noiseless=noiseless,
        wind_bias_deg=spec.wind_bias_deg,
    )
    return survey, truth
