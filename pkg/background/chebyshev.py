"""
Tensor-product Chebyshev (second kind) background over space and time.
"""
import itertools
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from loguru import logger

from core.exceptions import DomainError
from core.schema import Survey
from background.mrf import reference_level
from background.schema import BackgroundModel, ChebySpec, SparsePrecision

BOX_TOLERANCE = 1e-12
MIN_AXIS_SPAN = 1.0  # survey axes narrower than this are widened symmetrically


def cheby_table(t, degree: int) -> np.ndarray:
    """
    Values and first two derivatives of U_0 .. U_degree.

    Uses U_{n+1} = 2t U_n - U_{n-1} and its derivatives
    U'_{n+1} = 2 U_n + 2t U'_n - U'_{n-1}, U''_{n+1} = 4 U'_n + 2t U''_n - U''_{n-1}.

    Args:
        t: Points in [-1, 1], any shape.
        degree (int): Highest order.

    Returns:
        np.ndarray: Array of shape t.shape + (degree + 1, 3) holding (U, U', U'').
    """
    t = np.asarray(t, dtype=float)
    table = np.zeros(t.shape + (degree + 1, 3))
    table[..., 0, 0] = 1.0
    if degree >= 1:
        table[..., 1, 0] = 2.0 * t
        table[..., 1, 1] = 2.0
    for n in range(1, degree):
        u, du, d2u = table[..., n, 0], table[..., n, 1], table[..., n, 2]
        table[..., n + 1, 0] = 2.0 * t * u - table[..., n - 1, 0]
        table[..., n + 1, 1] = 2.0 * u + 2.0 * t * du - table[..., n - 1, 1]
        table[..., n + 1, 2] = 4.0 * du + 2.0 * t * d2u - table[..., n - 1, 2]
    return table


def cheby_eval(order: int, t):
    """
    Second-kind Chebyshev polynomial U_order(t).

    Examples:
        >>> cheby_eval(2, 0.5)
        0.0
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    values = cheby_table(t, order)[..., order, 0]
    return float(values) if np.ndim(values) == 0 else values


def basis_indices(degrees: Sequence[int]) -> list:
    """Tensor-product multi-indices (i, j, k, l), last axis fastest."""
    return list(itertools.product(*(range(d + 1) for d in degrees)))


def _product_columns(tables: Sequence[np.ndarray], indices: list, derivative: Tuple[int, int, int, int]) -> np.ndarray:
    """Rows are points, columns are basis functions, with ``derivative[a]`` applied on axis a."""
    points = tables[0].shape[0]
    out = np.ones((points, len(indices)))
    for c, index in enumerate(indices):
        for axis, order in enumerate(index):
            out[:, c] *= tables[axis][:, order, derivative[axis]]
    return out


def _tables(spec: ChebySpec, unit: np.ndarray) -> list:
    return [cheby_table(unit[:, axis], spec.degrees[axis]) for axis in range(4)]


def survey_coordinates(survey: Survey) -> np.ndarray:
    """(east, north, altitude, time) per measurement."""
    return np.column_stack([survey.positions, survey.times])


def cheby_basis(spec: ChebySpec, survey: Survey) -> np.ndarray:
    """
    Basis matrix P with one column per tensor-product index and one row per measurement.

    Raises:
        DomainError: If a survey coordinate lies outside the domain box.
    """
    unit = spec.to_unit(survey_coordinates(survey))
    outside = np.abs(unit) > 1.0 + BOX_TOLERANCE
    if outside.any():
        row, axis = np.argwhere(outside)[0]
        raise DomainError(f"measurement {row} lies outside the background box on axis {'xyzt'[axis]}")
    unit = np.clip(unit, -1.0, 1.0)
    return _product_columns(_tables(spec, unit), basis_indices(spec.degrees), (0, 0, 0, 0))


def penalty_operators(spec: ChebySpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Collocation operators behind the curvature and transport penalties.

    Returns:
        Tuple[np.ndarray, np.ndarray]: D2 stacking the mapped second derivative along each
        axis at every grid point, and D3 evaluating w.grad(b) + db/dt in survey units.
    """
    unit = np.clip(spec.to_unit(spec.grid), -1.0, 1.0)
    tables = _tables(spec, unit)
    indices = basis_indices(spec.degrees)
    curvature = []
    first = []
    for axis in range(4):
        order = [0, 0, 0, 0]
        order[axis] = 2
        curvature.append(_product_columns(tables, indices, tuple(order)))
        order[axis] = 1
        first.append(_product_columns(tables, indices, tuple(order)) * spec.scale[axis])
    d2 = np.vstack(curvature)
    wind = spec.grid_wind
    d3 = wind[:, 0:1] * first[0] + wind[:, 1:2] * first[1] + first[3]
    return d2, d3


def cheby_penalties(spec: ChebySpec) -> SparsePrecision:
    """
    J = mu1 I + mu2 J2 + mu3 J3 with root [sqrt(mu1) I; sqrt(mu2) D2; sqrt(mu3) D3].

    J2 = D2^T D2 penalises curvature and J3 = D3^T D3 penalises departures from pure
    advection by the wind; both annihilate the constant coefficient vector.
    """
    d2, d3 = penalty_operators(spec)
    r = spec.size
    root = sp.vstack([
        np.sqrt(spec.mu1) * sp.identity(r, format="csr"),
        sp.csr_matrix(np.sqrt(spec.mu2) * d2),
        sp.csr_matrix(np.sqrt(spec.mu3) * d3),
    ]).tocsr()
    matrix = spec.mu1 * np.eye(r) + spec.mu2 * (d2.T @ d2) + spec.mu3 * (d3.T @ d3)
    matrix = 0.5 * (matrix + matrix.T)
    return SparsePrecision(matrix=sp.csr_matrix(matrix), root=root)


def collocation_nodes(points: int) -> np.ndarray:
    """Chebyshev-Gauss nodes on [-1, 1]."""
    k = np.arange(points)
    return np.cos((2 * k + 1) * np.pi / (2 * points))[::-1]


def cheby_spec_for_survey(
    survey: Survey,
    degrees: Tuple[int, int, int, int] = (2, 2, 0, 2),
    mu1: float = 1e-6,
    mu2: float = 1.0,
    mu3: float = 1.0,
    b0: Optional[float] = None,
    grid_points: int = 5,
    beta0_percentile: float = 5.0,
) -> ChebySpec:
    """
    Domain box spanning the survey plus a tensor collocation grid.

    Axes with degree 0 collapse to the box centre. Wind at a grid point is the survey wind
    interpolated linearly in time.
    """
    coords = survey_coordinates(survey)
    lower = coords.min(axis=0)
    upper = coords.max(axis=0)
    narrow = upper - lower < MIN_AXIS_SPAN
    centre = 0.5 * (lower + upper)
    lower = np.where(narrow, centre - 0.5 * MIN_AXIS_SPAN, lower)
    upper = np.where(narrow, centre + 0.5 * MIN_AXIS_SPAN, upper)
    axes = [collocation_nodes(grid_points) if d > 0 else np.zeros(1) for d in degrees]
    unit = np.array(list(itertools.product(*axes)))
    grid = lower + (unit + 1.0) * 0.5 * (upper - lower)
    order = np.argsort(survey.times)
    grid_wind = np.column_stack([
        np.interp(grid[:, 3], survey.times[order], survey.wind[order, 0]),
        np.interp(grid[:, 3], survey.times[order], survey.wind[order, 1]),
    ])
    level = reference_level(survey.concentrations, beta0_percentile) if b0 is None else float(b0)
    return ChebySpec(
        degrees=tuple(int(d) for d in degrees),
        lower=tuple(float(v) for v in lower),
        upper=tuple(float(v) for v in upper),
        mu1=mu1,
        mu2=mu2,
        mu3=mu3,
        b0=level,
        grid=grid,
        grid_wind=grid_wind,
    )


def chebyshev_background(survey: Survey, spec: ChebySpec, mu: float = 1.0) -> BackgroundModel:
    """
    Chebyshev background with beta0 = (b0, 0, ..., 0), the constant field at the reference level.

    Args:
        survey (Survey): Survey to evaluate the basis on.
        spec (ChebySpec): Degrees, box, weights and collocation grid.
        mu (float): Overall smoothness weight multiplying J.

    Returns:
        BackgroundModel: Model with beta initialised to beta0.
    """
    basis = cheby_basis(spec, survey)
    reference = np.zeros(spec.size)
    reference[0] = spec.b0
    logger.info(f"Chebyshev background: degrees {spec.degrees}, {spec.size} coefficients, {spec.grid.shape[0]} grid points")
    return BackgroundModel(
        kind="chebyshev",
        basis=sp.csr_matrix(basis),
        beta=reference.copy(),
        beta0=reference,
        precision=cheby_penalties(spec),
        mu=float(mu),
    )
