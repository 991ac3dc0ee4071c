import numpy as np
import pytest
from scipy.special import eval_chebyt, eval_chebyu

from background.chebyshev import (
    basis_indices,
    cheby_basis,
    cheby_eval,
    cheby_penalties,
    cheby_spec_for_survey,
    cheby_table,
    chebyshev_background,
    penalty_operators,
)
from background.mrf import (
    assemble_mrf_precision,
    build_wind_links,
    edge_separations,
    link_strength,
    mrf_background,
    mrf_edges,
)
from background.schema import LinkKind, MrfSpec
from core.exceptions import DegenerateLinkError, DomainError
from core.schema import Survey
from tests.conftest import straight_survey


def _track(points, wind, dt=3.0, altitude=150.0) -> Survey:
    points = np.asarray(points, dtype=float)
    n = len(points)
    return Survey(
        times=dt * np.arange(n),
        positions=np.column_stack([points, np.full(n, altitude)]),
        concentrations=np.full(n, 1800.0),
        wind=np.broadcast_to(np.asarray(wind, dtype=float), (n, 2)).copy(),
    )


def _two_passes() -> Survey:
    first = [(100.0 * k, 0.0) for k in range(10)]
    second = [(930.0 - 100.0 * k, 500.0) for k in range(10)]
    return _track(first + second, (0.0, 5.0))


def _random_track(rng, n=50) -> Survey:
    steps = rng.normal(0.0, 80.0, size=(n, 2)) + np.array([60.0, 0.0])
    points = np.cumsum(steps, axis=0)
    survey = _track(points, (0.0, 1.0))
    wind = np.column_stack([rng.uniform(-6, 6, n), rng.uniform(-6, 6, n)])
    return Survey(times=np.cumsum(rng.uniform(1.0, 4.0, n)), positions=survey.positions, concentrations=survey.concentrations, wind=wind)


def _brute_force_links(survey: Survey):
    points = survey.positions[:, :2]
    links = []
    for i in range(survey.n):
        for k in range(i + 1, survey.n - 1):
            seg = points[k + 1] - points[k]
            system = np.column_stack([survey.wind[i], -seg])
            if abs(np.linalg.det(system)) < 1e-9:
                continue
            ray, along = np.linalg.solve(system, points[k] - points[i])
            if ray > 0 and 0.0 <= along < 1.0:
                j = k if along < 0.5 else k + 1
                if j > i + 1:
                    links.append((i, j))
                break
    return links


def test_parallel_track_has_no_wind_links():
    survey = _track([(50.0 * k, 0.0) for k in range(12)], (5.0, 0.0))
    assert build_wind_links(survey) == []


def test_second_pass_downwind_links_to_nearest_point():
    links = build_wind_links(_two_passes())
    assert links == [(i, 19 - i) for i in range(1, 9)]


def test_wind_links_match_brute_force_scan(rng):
    for _ in range(5):
        survey = _random_track(rng, n=20)
        assert build_wind_links(survey) == _brute_force_links(survey)


def test_wind_links_skip_adjacent_points(rng):
    survey = _random_track(rng)
    for i, j in build_wind_links(survey):
        assert j > i + 1


@pytest.mark.parametrize(
    "delta_t, delta_d, c_t, c_d, expected",
    [(1.0, 123.0, 1.0, 0.0, 1.0), (2.0, 0.0, 0.5, 0.0, 1.0), (0.0, 10.0, 0.1, 0.1, 1.0)],
)
def test_link_strength(delta_t, delta_d, c_t, c_d, expected):
    assert link_strength(delta_t, delta_d, c_t, c_d) == pytest.approx(expected)


def test_link_strength_inverse_square():
    base = link_strength(10.0, 100.0, 0.005, 0.0005)
    assert link_strength(20.0, 200.0, 0.005, 0.0005) == pytest.approx(base / 4.0)


def test_coincident_points_make_a_degenerate_link():
    with pytest.raises(DegenerateLinkError):
        link_strength(0.0, 0.0, 0.005, 0.0005)


def test_self_edges_are_rejected():
    with pytest.raises(ValueError):
        MrfSpec(edges=((3, 3, LinkKind.WIND),))
    with pytest.raises(ValueError):
        MrfSpec(edges=((0, 2, LinkKind.ADJACENT),))


def test_single_edge_precision():
    survey = Survey(
        times=np.array([0.0, 1.0]),
        positions=np.zeros((2, 3)),
        concentrations=np.array([1800.0, 1800.0]),
        wind=np.ones((2, 2)),
    )
    spec = MrfSpec(c_t=1.0, c_d=1e-3, edges=((0, 1, LinkKind.ADJACENT),))
    precision = assemble_mrf_precision(spec, survey)
    np.testing.assert_allclose(precision.matrix.toarray(), [[1.0, -1.0], [-1.0, 1.0]])
    np.testing.assert_allclose((precision.root.T @ precision.root).toarray(), precision.matrix.toarray())


def test_precision_quadratic_form_and_null_space(rng):
    survey = _random_track(rng)
    spec = mrf_edges(survey)
    precision = assemble_mrf_precision(spec, survey)
    dense = precision.matrix.toarray()
    np.testing.assert_allclose(dense @ np.ones(survey.n), 0.0, atol=1e-8 * np.abs(dense).max())
    np.testing.assert_allclose(dense, dense.T)
    assert np.linalg.eigvalsh(dense).min() >= -1e-10 * np.abs(dense).max()

    delta_t, delta_d = edge_separations(spec, survey)
    alpha = [link_strength(dt, dd, spec.c_t, spec.c_d) for dt, dd in zip(delta_t, delta_d)]
    for _ in range(100):
        x = rng.normal(1800.0, 20.0, survey.n)
        direct = sum(a * (x[i] - x[j]) ** 2 for a, (i, j, _) in zip(alpha, spec.edges))
        assert precision.quadratic(x) == pytest.approx(direct, rel=1e-10)


def test_wind_link_distance_is_from_advected_air():
    survey = _two_passes()
    spec = mrf_edges(survey)
    assert spec.wind_links == build_wind_links(survey)
    delta_t, delta_d = edge_separations(spec, survey)
    index = next(e for e, (i, j, kind) in enumerate(spec.edges) if kind == LinkKind.WIND and i == 1)
    _, j, _ = spec.edges[index]
    elapsed = survey.times[j] - survey.times[1]
    advected = survey.positions[1, :2] + survey.wind[1] * elapsed
    assert delta_t[index] == pytest.approx(elapsed)
    assert delta_d[index] == pytest.approx(np.linalg.norm(survey.positions[j, :2] - advected))


def test_mrf_background_reference_level():
    survey = straight_survey(n=20)
    survey = survey.with_concentrations(np.linspace(1800.0, 1819.0, 20))
    model = mrf_background(survey)
    assert model.r == model.n == 20
    np.testing.assert_allclose(model.beta0, np.percentile(survey.concentrations, 5.0))
    assert model.penalty(model.beta0) == 0.0


def test_chebyshev_recurrence_examples():
    assert cheby_eval(2, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert cheby_eval(3, 0.5) == pytest.approx(-1.0)


def test_chebyshev_trigonometric_form(rng):
    theta = rng.uniform(0.05, np.pi - 0.05, 100)
    for n in range(11):
        np.testing.assert_allclose(cheby_eval(n, np.cos(theta)), np.sin((n + 1) * theta) / np.sin(theta), atol=1e-12)


def test_chebyshev_table_matches_scipy():
    t = np.linspace(-0.95, 0.95, 41)
    table = cheby_table(t, 6)
    for n in range(7):
        np.testing.assert_allclose(table[:, n, 0], eval_chebyu(n, t), atol=1e-12)
        derivative = ((n + 1) * eval_chebyt(n + 1, t) - t * eval_chebyu(n, t)) / (t ** 2 - 1.0)
        np.testing.assert_allclose(table[:, n, 1], derivative, atol=1e-9)


@pytest.mark.parametrize("degrees, columns", [((0, 0, 0, 0), 1), ((1, 0, 0, 0), 2), ((2, 2, 0, 1), 18), ((2, 2, 0, 2), 27)])
def test_basis_column_count(degrees, columns):
    survey = straight_survey(n=8)
    spec = cheby_spec_for_survey(survey, degrees=degrees)
    basis = cheby_basis(spec, survey)
    assert basis.shape == (survey.n, columns)
    assert len(basis_indices(degrees)) == columns


def test_linear_basis_columns():
    survey = straight_survey(n=8)
    spec = cheby_spec_for_survey(survey, degrees=(1, 0, 0, 0))
    basis = cheby_basis(spec, survey)
    mapped = spec.to_unit(np.column_stack([survey.positions, survey.times]))[:, 0]
    np.testing.assert_allclose(basis[:, 0], 1.0)
    np.testing.assert_allclose(basis[:, 1], 2.0 * mapped)


def test_points_outside_the_box_are_rejected():
    survey = straight_survey(n=8)
    spec = cheby_spec_for_survey(survey, degrees=(1, 0, 0, 1))
    shifted = Survey(times=survey.times, positions=survey.positions + np.array([1000.0, 0.0, 0.0]), concentrations=survey.concentrations, wind=survey.wind)
    with pytest.raises(DomainError):
        cheby_basis(spec, shifted)


def test_reference_only_penalty():
    spec = cheby_spec_for_survey(straight_survey(n=8), degrees=(2, 1, 0, 2), mu1=0.3, mu2=0.0, mu3=0.0)
    np.testing.assert_allclose(cheby_penalties(spec).matrix.toarray(), 0.3 * np.eye(spec.size))


def test_constant_field_is_not_penalised():
    spec = cheby_spec_for_survey(straight_survey(n=8), degrees=(2, 2, 0, 2), b0=1850.0)
    beta = np.zeros(spec.size)
    beta[0] = spec.b0
    d2, d3 = penalty_operators(spec)
    np.testing.assert_allclose(d2 @ beta, 0.0, atol=1e-12)
    np.testing.assert_allclose(d3 @ beta, 0.0, atol=1e-12)
    matrix = cheby_penalties(spec).matrix.toarray()
    assert np.linalg.eigvalsh(matrix).min() >= -1e-10 * np.abs(matrix).max()


def test_advected_field_has_no_transport_residual():
    speed = 4.0
    survey = straight_survey(n=10, wind=(speed, 0.0))
    spec = cheby_spec_for_survey(survey, degrees=(1, 0, 0, 1), mu1=0.0, mu2=0.0, mu3=1.0)
    # index order (0,0,0,0), (0,0,0,1), (1,0,0,0), (1,0,0,1)
    scale_x, scale_t = spec.scale[0], spec.scale[3]
    c1 = 2.0
    beta = np.array([0.0, -speed * c1 * scale_x / scale_t, c1, 0.0])
    _, d3 = penalty_operators(spec)
    np.testing.assert_allclose(d3 @ beta, 0.0, atol=1e-10)
    assert cheby_penalties(spec).quadratic(beta) == pytest.approx(0.0, abs=1e-10)


def test_chebyshev_background_starts_at_reference():
    survey = straight_survey(n=8)
    model = chebyshev_background(survey, cheby_spec_for_survey(survey, b0=1790.0), mu=2.0)
    np.testing.assert_allclose(model.evaluate(), 1790.0)
    assert model.kind == "chebyshev"
