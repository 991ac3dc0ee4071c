import math

import numpy as np
import pytest

from core.exceptions import DegenerateFrameError
from core.geometry import (
    downwind_frame,
    downwind_offsets,
    rotate,
    wind_from_meteorological,
    wind_to_meteorological,
    wrap_angle,
)
from core.schema import Source, SourceSet, Survey, UnitConvention
from tests.conftest import straight_survey


def test_northerly_wind_blows_south():
    np.testing.assert_allclose(wind_from_meteorological(5.0, 0.0), [0.0, -5.0], atol=1e-12)


def test_westerly_wind_blows_east():
    np.testing.assert_allclose(wind_from_meteorological(2.0, 270.0), [2.0, 0.0], atol=1e-12)


def test_meteorological_round_trip():
    speed, direction = wind_to_meteorological(wind_from_meteorological([3.0, 6.5], [218.0, 10.0]))
    np.testing.assert_allclose(speed, [3.0, 6.5])
    np.testing.assert_allclose(direction, [218.0, 10.0])


def test_rotate_is_counter_clockwise():
    np.testing.assert_allclose(rotate([1.0, 0.0], math.pi / 2), [0.0, 1.0], atol=1e-12)


@pytest.mark.parametrize(
    "angle, expected",
    [(0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi), (1.5 * math.pi, -0.5 * math.pi), (7.0, 7.0 - 2 * math.pi), (math.pi + 0.01, -math.pi + 0.01)],
)
def test_wrap_angle(angle, expected):
    assert wrap_angle(angle) == pytest.approx(expected)


def test_downwind_frame_axes():
    # wind toward the north: along = northing, across = minus easting
    along, across, vertical = downwind_frame((30.0, 100.0, 80.0), Source(location=(0.0, 0.0)), (0.0, 4.0))
    assert along == pytest.approx(100.0)
    assert across == pytest.approx(-30.0)
    assert vertical == pytest.approx(80.0)


def test_zero_wind_has_no_frame():
    with pytest.raises(DegenerateFrameError):
        downwind_offsets(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 2)))


def test_source_set_arrays():
    sources = SourceSet.from_arrays([[1.0, 2.0], [3.0, 4.0]], 10.0, [0.1, 0.2])
    assert sources.m == 2
    np.testing.assert_allclose(sources.half_widths(), [10.0, 10.0])
    np.testing.assert_allclose(sources.heights(), [0.0, 0.0])
    with pytest.raises(ValueError):
        sources.check_capacity(1)


def test_unit_convention_predicts_ppb():
    predicted = UnitConvention.predict(np.array([[1e-9, 2e-9]]), np.array([1.0, 0.5]), np.array([1800.0]))
    np.testing.assert_allclose(predicted, [1802.0])


def test_survey_measurements_and_subset():
    survey = straight_survey(n=5)
    rebuilt = Survey.from_measurements(survey.measurements)
    np.testing.assert_array_equal(rebuilt.positions, survey.positions)
    part = survey.subset([1, 3])
    assert part.n == 2
    np.testing.assert_array_equal(part.times, [1.0, 3.0])
    np.testing.assert_array_equal(part.positions[:, 0], [50.0, 150.0])


@pytest.mark.parametrize("times", [[0.0, 0.0, 1.0], [2.0, 1.0, 3.0]])
def test_survey_times_must_increase(times):
    survey = straight_survey(n=3)
    with pytest.raises(ValueError):
        Survey(times=times, positions=survey.positions, concentrations=survey.concentrations, wind=survey.wind)
