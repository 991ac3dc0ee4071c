import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from core.schema import Measurement, Source, SourceSet, Survey
from plume.kernel import build_matrix, coupling, coupling_field
from plume.schema import PlumeGeometry

GAMMA = math.radians(12.7)
TAN = math.tan(GAMMA)


def test_on_axis_ground_value():
    geom = PlumeGeometry(opening_angle_h=math.pi / 4, opening_angle_v=math.pi / 4, abl_depth=1e9)
    measurement = Measurement(time=0.0, position=(1.0, 0.0, 0.0), concentration=0.0, wind=(1.0, 0.0))
    assert coupling(measurement, Source(location=(0.0, 0.0)), geom) == pytest.approx(1.0 / math.pi)


def test_upwind_is_zero():
    geom = PlumeGeometry()
    measurement = Measurement(time=0.0, position=(-5.0, 0.0, 50.0), concentration=0.0, wind=(3.0, 0.0))
    assert coupling(measurement, Source(location=(0.0, 0.0), half_width=20.0), geom) == 0.0


def test_well_mixed_limit():
    speed, depth = 6.5, 400.0
    along = 5.0 * depth / TAN
    sigma_h = along * TAN
    args = (along, 0.0, 200.0, 0.0, 0.0, speed, TAN, TAN, depth)
    value = coupling_field(*args)
    brute = coupling_field(*args, image_terms=1000)
    assert value == pytest.approx(brute, rel=1e-6)
    assert value == pytest.approx(1.0 / (speed * depth) / (math.sqrt(2 * math.pi) * sigma_h), rel=0.01)


@pytest.mark.parametrize("ratio", [0.1, 1.0, 5.0])
@pytest.mark.parametrize("height", [0.0, 50.0])
def test_flux_conservation(ratio, height):
    speed, depth = 4.0, 400.0
    along = ratio * depth / TAN
    sigma_h = along * TAN + 30.0
    across = np.linspace(-10 * sigma_h, 10 * sigma_h, 801)
    vertical = np.linspace(0.0, depth, 4001)
    field = coupling_field(along, across[:, None], vertical[None, :], 30.0, height, speed, TAN, TAN, depth)
    flux = speed * trapezoid(trapezoid(field, vertical, axis=1), across)
    assert flux == pytest.approx(1.0, abs=1e-3)


def test_even_in_crosswind_offset():
    plus = coupling_field(900.0, 75.0, 120.0, 10.0, 5.0, 6.0, TAN, TAN, 400.0)
    minus = coupling_field(900.0, -75.0, 120.0, 10.0, 5.0, 6.0, TAN, TAN, 400.0)
    assert plus == minus


@pytest.mark.parametrize("height", [0.0, 30.0])
def test_on_axis_dilution_is_monotone(height):
    along = np.geomspace(1.0, 60000.0, 400)
    values = coupling_field(along, 0.0, height, 0.0, height, 5.0, TAN, TAN, 400.0)
    assert np.all(np.diff(values) <= 1e-15)


def test_image_increments_shrink():
    args = (400.0 / TAN, 0.0, 100.0, 0.0, 0.0, 5.0, TAN, TAN, 400.0)
    values = np.array([coupling_field(*args, image_terms=k) for k in range(2, 10)])
    increments = np.abs(np.diff(values))
    assert np.all(np.diff(increments) <= 1e-18)


def test_empty_source_set_gives_empty_matrix(survey):
    matrix = build_matrix(survey, SourceSet(), PlumeGeometry())
    assert matrix.shape == (survey.n, 0)
    assert not (matrix @ np.zeros(0)).any()


def test_matrix_entry_matches_coupling():
    geom = PlumeGeometry(wind_bias=math.radians(3.0))
    measurement = Measurement(time=0.0, position=(800.0, 40.0, 90.0), concentration=1800.0, wind=(6.0, 0.5))
    source = Source(location=(0.0, 0.0), half_width=50.0, emission_rate=0.1, height=2.0)
    survey = Survey.from_measurements([measurement])
    matrix = build_matrix(survey, SourceSet(sources=(source,)), geom)
    assert matrix.shape == (1, 1)
    assert matrix[0, 0] == pytest.approx(coupling(measurement, source, geom), rel=1e-12)


def test_matrix_is_finite_and_non_negative(survey):
    sources = SourceSet.from_arrays([[-500.0, -2000.0], [100.0, 300.0], [0.0, 5000.0]], 25.0, 0.1)
    matrix = build_matrix(survey, sources, PlumeGeometry())
    assert np.isfinite(matrix).all()
    assert (matrix >= 0).all()
    # the third source lies downwind of the whole track
    assert not matrix[:, 2].any()
