"""
Alternating initial estimate of gridded emission rates and background.

Minimises

    (1/2 sigma^2) ||A s + P beta - y||^2 + (mu/2)(beta - beta0)^T J (beta - beta0) + lam q^T s

over 0 <= s <= s_max and P beta <= y + tau by alternating a background step
(augmented Lagrangian with Newton inner iterations) and a source step
(projected gradient with step 1/L and monotone restart).
"""
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from loguru import logger

from background.schema import BackgroundModel
from core.exceptions import ConvergenceError
from core.schema import Survey, UnitConvention
from optimizer.schema import OptimizerConfig, OptimizerResult, SourceGrid
from plume.kernel import plume_columns
from plume.schema import PlumeGeometry

CALIBRATION_SHARE = 0.01
ARMIJO = 1e-4


def objective(s, beta, A, background: BackgroundModel, y, config: OptimizerConfig) -> float:
    """
    Value of the penalised least-squares objective.

    Args:
        s: Source rates, m3/s.
        beta: Background coefficients.
        A: Coupling in ppb per m3/s.
        background (BackgroundModel): Supplies P, J and beta0.
        y: Measured concentrations, ppb.
        config (OptimizerConfig): Resolved weights.

    Returns:
        float: Objective value.
    """
    s = np.asarray(s, dtype=float)
    residual = A @ s + background.basis @ beta - y
    data = 0.5 * float(residual @ residual) / config.sigma ** 2
    smooth = 0.5 * (config.mu or 0.0) * background.precision.quadratic(np.asarray(beta) - background.beta0)
    sparse = (config.lam or 0.0) * float(config.weights(s.shape[0]) @ s)
    return data + smooth + sparse


def psi(a, b, eta):
    """
    Augmented Lagrangian term for one inequality a >= 0 with multiplier b.

    Returns -b a + a^2 / (2 eta) when a - eta b <= 0 and -eta b^2 / 2 otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    value = np.where(a - eta * b <= 0, -b * a + a ** 2 / (2.0 * eta), -0.5 * eta * b ** 2)
    return float(value) if value.ndim == 0 else value


class BackgroundStep(NamedTuple):
    beta: np.ndarray
    multipliers: np.ndarray
    slack: np.ndarray
    eta: float
    iterations: int


def _background_parts(s, A, background: BackgroundModel, y, config: OptimizerConfig):
    target = y - A @ np.asarray(s, dtype=float)
    P = background.basis
    hessian = (P.T @ P) / config.sigma ** 2 + config.mu * background.precision.matrix
    anchor = config.mu * (background.precision.matrix @ background.beta0)
    return target, sp.csr_matrix(hessian), anchor


def solve_background(
    s,
    A,
    background: BackgroundModel,
    y,
    config: OptimizerConfig,
    start: Optional[np.ndarray] = None,
    multipliers: Optional[np.ndarray] = None,
) -> BackgroundStep:
    """
    Background step: minimise the objective in beta subject to P beta <= y + tau.

    The constraint c(beta) = y + tau - P beta >= 0 enters through the psi penalty. Each
    outer iteration minimises the resulting piecewise quadratic with Newton steps on the
    current active set and an Armijo backtrack, recovers the slack w = max(c - eta z, 0),
    then updates z <- max(z - c / eta, 0). eta is divided by ten whenever the constraint
    violation fails to halve.

    Args:
        s: Fixed source rates.
        A: Coupling in ppb per m3/s.
        background (BackgroundModel): Basis, precision and reference.
        y: Measured concentrations, ppb.
        config (OptimizerConfig): Resolved weights and iteration caps.
        start: Initial beta, defaults to the background's current beta.
        multipliers: Initial multipliers, default zero.

    Returns:
        BackgroundStep: beta with the final multipliers, slack and penalty.

    Raises:
        ConvergenceError: When the outer cap is reached; ``partial`` holds the last step.
    """
    y = np.asarray(y, dtype=float)
    P = background.basis
    upper = y + config.tau
    target, hessian, anchor = _background_parts(s, A, background, y, config)
    linear = (P.T @ target) / config.sigma ** 2 + anchor
    beta = np.array(background.beta if start is None else start, dtype=float)
    z = np.zeros(P.shape[0]) if multipliers is None else np.array(multipliers, dtype=float)
    eta = config.eta
    previous_violation = np.inf

    def lagrangian(b):
        c = upper - P @ b
        return 0.5 * float(b @ (hessian @ b)) - float(linear @ b) + float(np.sum(psi(c, z, eta)))

    def gradient(b):
        c = upper - P @ b
        active = (c - eta * z <= 0).astype(float)
        g = hessian @ b - linear + P.T @ (active * (z - c / eta))
        return g, active

    for outer in range(1, config.background_max_iter + 1):
        for _ in range(config.newton_max_iter):
            g, active = gradient(beta)
            if np.linalg.norm(g, np.inf) <= 1e-10 * max(1.0, np.linalg.norm(linear, np.inf)):
                break
            system = (hessian + (P.T @ sp.diags(active) @ P) / eta).tocsc()
            step = spla.spsolve(system, -g)
            if not np.all(np.isfinite(step)):
                step = -g
            value = lagrangian(beta)
            slope = float(g @ step)
            size = 1.0
            while size > 1e-12 and lagrangian(beta + size * step) > value + ARMIJO * size * slope:
                size *= 0.5
            beta = beta + size * step
        c = upper - P @ beta
        slack = np.maximum(c - eta * z, 0.0)
        violation = float(np.max(np.abs(c - slack))) if c.size else 0.0
        z = np.maximum(z - c / eta, 0.0)
        infeasibility = float(max(0.0, -np.min(c))) if c.size else 0.0
        complementarity = float(np.max(np.abs(np.minimum(c, z)))) if c.size else 0.0
        logger.debug(
            f"background AL {outer}: infeasibility {infeasibility:.3e}, complementarity {complementarity:.3e}, eta {eta:.1e}"
        )
        if infeasibility <= config.feasibility_tol and complementarity <= config.feasibility_tol:
            return BackgroundStep(beta, z, slack, eta, outer)
        if violation > 0.5 * previous_violation:
            eta /= 10.0
        previous_violation = violation

    raise ConvergenceError(
        f"background step did not converge in {config.background_max_iter} iterations",
        partial=BackgroundStep(beta, z, np.maximum(upper - P @ beta - eta * z, 0.0), eta, config.background_max_iter),
        iterations=config.background_max_iter,
    )


def lipschitz_constant(A, sigma: float) -> float:
    """L = ||A||_2^2 / sigma^2, the curvature bound of the source data term."""
    if A.size == 0:
        return 1.0
    return max(float(np.linalg.norm(A, 2)) ** 2 / sigma ** 2, np.finfo(float).tiny)


def solve_sources(
    beta,
    A,
    background: BackgroundModel,
    y,
    config: OptimizerConfig,
    start: Optional[np.ndarray] = None,
    lipschitz: Optional[float] = None,
) -> np.ndarray:
    """
    Source step: minimise (1/2 sigma^2)||A s + P beta - y||^2 + lam q^T s over [0, s_max]^m.

    Majorise-minimise with step 1/L, accelerated, restarting from the last accepted iterate
    whenever the accelerated point would raise the objective.

    Args:
        beta: Fixed background coefficients.
        A: Coupling in ppb per m3/s.
        background (BackgroundModel): Supplies the basis P.
        y: Measured concentrations, ppb.
        config (OptimizerConfig): Resolved weights and caps.
        start: Initial rates, default zero.
        lipschitz: Precomputed L.

    Returns:
        np.ndarray: Rates with projected gradient norm below ``sources_tol``.

    Raises:
        ConvergenceError: When the cap is reached; ``partial`` holds the last iterate.
    """
    m = A.shape[1]
    if m == 0:
        return np.zeros(0)
    target = np.asarray(y, dtype=float) - background.basis @ beta
    linear = (config.lam or 0.0) * config.weights(m)
    step = 1.0 / (lipschitz or lipschitz_constant(A, config.sigma))
    inv_var = 1.0 / config.sigma ** 2

    def value(s):
        r = A @ s - target
        return 0.5 * inv_var * float(r @ r) + float(linear @ s)

    def grad(s):
        return inv_var * (A.T @ (A @ s - target)) + linear

    def project(s):
        return np.clip(s, 0.0, config.s_max)

    s = project(np.zeros(m) if start is None else np.array(start, dtype=float))
    x = s.copy()
    current = value(s)
    t = 1.0
    scale = max(1.0, float(np.max(np.abs(grad(np.zeros(m))))))
    for it in range(1, config.sources_max_iter + 1):
        u = project(x - step * grad(x))
        candidate = value(u)
        if candidate > current:
            t = 1.0
            u = project(s - step * grad(s))
            candidate = value(u)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        x = u + ((t - 1.0) / t_next) * (u - s)
        s, current, t = u, candidate, t_next
        projected = float(np.max(np.abs(s - project(s - grad(s)))))
        if projected <= config.sources_tol * scale:
            logger.debug(f"source step converged after {it} iterations")
            return s
    raise ConvergenceError(
        f"source step did not converge in {config.sources_max_iter} iterations",
        partial=s,
        iterations=config.sources_max_iter,
    )


def calibrate_weights(A, background: BackgroundModel, y, config: OptimizerConfig) -> OptimizerConfig:
    """
    Fill in unset mu, lam and tau.

    tau defaults to 3 sigma. mu makes the smoothness penalty at the least-squares background
    fit equal to 1% of the data term (1/2 sigma^2)||y - P beta0||^2; lam makes lam q^T s equal
    to 1% of the same term at the unpenalised box-constrained source fit. Either falls back
    to 1.0 when its reference quantity vanishes.

    Returns:
        OptimizerConfig: Copy with mu, lam and tau set.
    """
    y = np.asarray(y, dtype=float)
    updates = {}
    if config.tau is None:
        updates["tau"] = 3.0 * config.sigma
    residual = y - background.basis @ background.beta0
    data = 0.5 * float(residual @ residual) / config.sigma ** 2
    if config.mu is None:
        fit = spla.lsqr(background.basis, y, atol=1e-12, btol=1e-12)[0]
        quadratic = 0.5 * background.precision.quadratic(fit - background.beta0)
        updates["mu"] = CALIBRATION_SHARE * data / quadratic if quadratic > 0 and data > 0 else 1.0
    if config.lam is None:
        free = config.model_copy(update={"lam": 0.0})
        try:
            fit = solve_sources(background.beta0, A, background, y, free)
        except ConvergenceError as e:
            fit = e.partial
        weighted = float(config.weights(A.shape[1]) @ fit) if A.shape[1] else 0.0
        updates["lam"] = CALIBRATION_SHARE * data / weighted if weighted > 0 and data > 0 else 1.0
    if updates:
        logger.info("calibrated " + ", ".join(f"{k}={v:.6g}" for k, v in updates.items()))
    return config.model_copy(update=updates)


def grid_coupling(survey: Survey, grid: SourceGrid, geom: PlumeGeometry, source_height: float = 0.0) -> np.ndarray:
    """Coupling from every grid cell to every measurement, in ppb per m3/s."""
    centers = grid.cell_centers()
    coupling = plume_columns(
        survey.positions,
        survey.wind,
        centers,
        np.full(grid.m, 0.5 * grid.cell_size),
        np.full(grid.m, source_height),
        geom,
    )
    return UnitConvention.to_ppb(coupling)


def _feasible(beta, background: BackgroundModel, y, tau: float) -> bool:
    return float(np.max(background.basis @ beta - y - tau, initial=-np.inf)) <= 1e-6


def solve(
    survey: Survey,
    grid: SourceGrid,
    background: BackgroundModel,
    config: OptimizerConfig,
    geom: Optional[PlumeGeometry] = None,
    source_height: float = 0.0,
    A: Optional[np.ndarray] = None,
) -> OptimizerResult:
    """
    Alternate background and source steps until the objective settles.

    Subproblem non-convergence is not fatal: the last iterate is kept, a warning is logged
    and the result is flagged ``converged=False``.

    Args:
        survey (Survey): Measurements.
        grid (SourceGrid): Candidate source cells.
        background (BackgroundModel): Background basis and prior.
        config (OptimizerConfig): Weights and caps; unset weights are calibrated.
        geom (Optional[PlumeGeometry]): Plume geometry, default values when omitted.
        source_height (float): Height of every grid source.
        A: Precomputed coupling in ppb per m3/s.

    Returns:
        OptimizerResult: Fitted grid, background and diagnostics.
    """
    geom = geom or PlumeGeometry()
    y = survey.concentrations
    if A is None:
        A = grid_coupling(survey, grid, geom, source_height)
    logger.info(f"optimizer: {survey.n} measurements, {grid.m} cells, background {background.kind} (r={background.r})")
    config = calibrate_weights(A, background, y, config)
    lipschitz = lipschitz_constant(A, config.sigma)
    warnings = []
    converged = True

    s = np.zeros(A.shape[1])
    beta = np.array(background.beta, dtype=float)
    multipliers = None
    trace = []
    current = np.inf
    for outer in range(1, config.max_outer + 1):
        try:
            step = solve_background(s, A, background, y, config, start=beta, multipliers=multipliers)
        except ConvergenceError as e:
            step = e.partial
            converged = False
            warnings.append(f"outer {outer}: {e.message}")
            logger.warning(e.message)
        # keep the previous feasible background if the new one would raise the objective
        if not np.isfinite(current) or (
            _feasible(step.beta, background, y, config.tau)
            and (
                not _feasible(beta, background, y, config.tau)
                or objective(s, step.beta, A, background, y, config) <= objective(s, beta, A, background, y, config)
            )
        ):
            beta = step.beta
        multipliers = step.multipliers

        try:
            s = solve_sources(beta, A, background, y, config, start=s, lipschitz=lipschitz)
        except ConvergenceError as e:
            s = e.partial
            converged = False
            warnings.append(f"outer {outer}: {e.message}")
            logger.warning(e.message)

        value = objective(s, beta, A, background, y, config)
        trace.append(value)
        logger.debug(f"outer {outer}: objective {value:.10g}")
        if np.isfinite(current) and current - value <= config.tol * max(1.0, abs(value)):
            break
        current = value
    else:
        converged = False
        warnings.append(f"outer iteration cap {config.max_outer} reached")
        logger.warning(f"optimizer stopped at the outer iteration cap {config.max_outer}")

    fitted_background = background.evaluate(beta)
    overshoot = float(np.max(fitted_background - y - config.tau, initial=-np.inf))
    if overshoot > 1e-6:
        warnings.append(f"background exceeds y + tau by {overshoot:.3e} ppb")
        logger.warning(f"background exceeds y + tau by {overshoot:.3e} ppb")
    negative = background.negative_entries(beta)
    if negative:
        warnings.append(f"background negative at {negative} measurements")
        logger.warning(f"background negative at {negative} measurements")

    residual = y - (A @ s + fitted_background)
    logger.info(f"optimizer finished after {len(trace)} outer iterations, objective {trace[-1]:.6g}")
    return OptimizerResult(
        grid=grid.with_rates(s),
        beta=beta,
        background=background.with_beta(beta).with_mu(config.mu),
        objective_trace=trace,
        residual=residual,
        lam=float(config.lam),
        mu=float(config.mu),
        tau=float(config.tau),
        converged=converged,
        warnings=warnings,
    )
