"""
Gauss-Markov random field background on the measurement graph.

Every measurement carries its own background coefficient (P = I). Consecutive
measurements are linked, and so are measurements joined by the wind: the air at
point i is carried along the local wind until it meets a later part of the track.
"""
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from loguru import logger

from core.exceptions import DegenerateLinkError
from core.schema import Survey
from background.schema import BackgroundModel, LinkKind, MrfSpec, SparsePrecision

PARALLEL_TOLERANCE = 1e-12


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def build_wind_links(survey: Survey) -> List[Tuple[int, int]]:
    """
    Link each measurement to the later track point its wind ray first crosses.

    The ray from measurement i follows its wind vector in the horizontal plane. Segments
    (k, k+1) with k > i are scanned in track order and treated as half-open [p_k, p_k+1),
    so a crossing at a vertex belongs to the segment starting there. The first crossing at
    positive range wins and the link goes to whichever endpoint of that segment lies nearer
    to the crossing point. A link to j = i + 1 is dropped: the adjacent edge (i, i+1)
    already joins that pair, and a second edge would double its weight in J.

    Args:
        survey (Survey): Ordered trajectory with per-point wind.

    Returns:
        List[Tuple[int, int]]: Wind links (i, j) with j > i + 1.
    """
    points = survey.positions[:, :2]
    starts = points[:-1]
    segments = points[1:] - points[:-1]
    links = []
    for i in range(survey.n):
        direction = survey.wind[i]
        norm = np.hypot(*direction)
        k = np.arange(i + 1, survey.n - 1)
        if norm == 0 or k.size == 0:
            continue
        seg = segments[k]
        offset = starts[k] - points[i]
        denom = _cross(direction, seg)
        usable = np.abs(denom) > PARALLEL_TOLERANCE * norm * np.hypot(seg[:, 0], seg[:, 1])
        safe = np.where(usable, denom, 1.0)
        ray_range = _cross(offset, seg) / safe
        along_segment = _cross(offset, direction) / safe
        hits = usable & (ray_range > PARALLEL_TOLERANCE) & (along_segment >= 0.0) & (along_segment < 1.0)
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        start = int(k[first])
        j = start if along_segment[first] < 0.5 else start + 1
        if j > i + 1:
            links.append((i, j))
    logger.debug(f"{len(links)} wind links over {survey.n} measurements")
    return links


def link_strength(delta_t: float, delta_d: float, c_t: float, c_d: float) -> float:
    """
    Strength alpha = 1 / (c_T dT + c_D dD)^2 of one background link, in 1/ppb^2.

    Raises:
        DegenerateLinkError: If the two points coincide in time and space.
    """
    if delta_t < 0 or delta_d < 0:
        raise ValueError("link separations must be non-negative")
    spread = c_t * delta_t + c_d * delta_d
    if spread <= 0:
        raise DegenerateLinkError(f"link with dT={delta_t}, dD={delta_d} has no expected background change")
    return 1.0 / spread ** 2


def mrf_edges(survey: Survey, c_t: float = 0.005, c_d: float = 0.0005) -> MrfSpec:
    """Adjacent edges plus wind links for a survey."""
    edges = [(i, i + 1, LinkKind.ADJACENT) for i in range(survey.n - 1)]
    edges += [(i, j, LinkKind.WIND) for i, j in build_wind_links(survey)]
    return MrfSpec(c_t=c_t, c_d=c_d, edges=tuple(edges))


def edge_separations(spec: MrfSpec, survey: Survey) -> Tuple[np.ndarray, np.ndarray]:
    """
    Time and distance separation for every edge.

    Adjacent edges use the 3-D distance between the two measurements. Wind links use the
    horizontal distance from measurement j to where the air at i has been carried by j's time.
    """
    delta_t = np.empty(len(spec.edges))
    delta_d = np.empty(len(spec.edges))
    for e, (i, j, kind) in enumerate(spec.edges):
        if not (0 <= i < survey.n and 0 <= j < survey.n):
            raise ValueError(f"edge ({i}, {j}) is outside a survey of {survey.n} points")
        dt = abs(survey.times[j] - survey.times[i])
        if kind == LinkKind.ADJACENT:
            dd = float(np.linalg.norm(survey.positions[j] - survey.positions[i]))
        else:
            advected = survey.positions[i, :2] + survey.wind[i] * (survey.times[j] - survey.times[i])
            dd = float(np.linalg.norm(survey.positions[j, :2] - advected))
        delta_t[e] = dt
        delta_d[e] = dd
    return delta_t, delta_d


def assemble_mrf_precision(spec: MrfSpec, survey: Survey) -> SparsePrecision:
    """
    Assemble J = sum alpha_ij Lambda_ij together with its root diag(sqrt(alpha)) B.

    B is the signed edge incidence matrix, so x^T J x = sum alpha_ij (x_i - x_j)^2.

    Args:
        spec (MrfSpec): Edges and link constants.
        survey (Survey): Survey the edges index into.

    Returns:
        SparsePrecision: n x n precision and its (edges x n) root.
    """
    n = survey.n
    delta_t, delta_d = edge_separations(spec, survey)
    alpha = np.array([link_strength(dt, dd, spec.c_t, spec.c_d) for dt, dd in zip(delta_t, delta_d)])
    count = len(spec.edges)
    if count == 0:
        empty = sp.csr_matrix((0, n))
        return SparsePrecision(matrix=sp.csr_matrix((n, n)), root=empty)
    heads = np.array([e[0] for e in spec.edges])
    tails = np.array([e[1] for e in spec.edges])
    rows = np.repeat(np.arange(count), 2)
    cols = np.column_stack([heads, tails]).ravel()
    weights = np.sqrt(alpha)
    values = np.column_stack([weights, -weights]).ravel()
    root = sp.csr_matrix((values, (rows, cols)), shape=(count, n))
    matrix = (root.T @ root).tocsr()
    return SparsePrecision(matrix=matrix, root=root)


def reference_level(concentrations: np.ndarray, percentile: float = 5.0) -> float:
    """Clean-air reference level, a low percentile of the measured concentrations."""
    return float(np.percentile(np.asarray(concentrations, dtype=float), percentile))


def mrf_background(
    survey: Survey,
    c_t: float = 0.005,
    c_d: float = 0.0005,
    mu: float = 1.0,
    beta0: Optional[float] = None,
    beta0_percentile: float = 5.0,
) -> BackgroundModel:
    """
    Identity-basis background with the random-field precision.

    Args:
        survey (Survey): Survey defining the graph.
        c_t (float): Expected background change per second, ppb/s.
        c_d (float): Expected background change per meter, ppb/m.
        mu (float): Smoothness weight.
        beta0 (Optional[float]): Reference level; defaults to a low percentile of the data.
        beta0_percentile (float): Percentile used when ``beta0`` is not given.

    Returns:
        BackgroundModel: Model with beta initialised to the reference level.
    """
    spec = mrf_edges(survey, c_t, c_d)
    precision = assemble_mrf_precision(spec, survey)
    level = reference_level(survey.concentrations, beta0_percentile) if beta0 is None else float(beta0)
    reference = np.full(survey.n, level)
    logger.info(f"MRF background: {survey.n} nodes, {len(spec.edges)} edges, reference level {level:.3f} ppb")
    return BackgroundModel(
        kind="mrf",
        basis=sp.identity(survey.n, format="csr"),
        beta=reference.copy(),
        beta0=reference,
        precision=precision,
        mu=float(mu),
        edges=spec.edges,
    )
