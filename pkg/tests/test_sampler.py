import math
import pickle
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp
from scipy import integrate, stats

from background.mrf import mrf_background
from background.schema import BackgroundModel, SparsePrecision
from core.exceptions import ChainAbortedError
from core.schema import Measurement, Source, SourceSet
from optimizer.schema import SourceGrid
from plume.kernel import coupling
from plume.schema import PlumeGeometry
from sampler.chain import (
    AUDIT_TOLERANCE,
    ChainStart,
    audit,
    initial_state,
    initial_state_from_sources,
    merge_traces,
    run_chain,
    run_chains,
)
from sampler.jumps import (
    coalescible_pairs,
    dimension_move,
    propose_birth,
    propose_coalesce,
    propose_death,
    propose_split,
    split_log_ratio,
)
from sampler.moves import (
    BLOCKS,
    accept,
    background_conditional,
    gibbs_background,
    mh_block_update,
    update_opening_angles,
    update_sigma,
    update_wind_bias,
)
from sampler.posterior import log_posterior, refresh, source_coupling
from sampler.schema import AcceptanceTally, ChainState, ChainTrace, Priors, ProposalScales, Schedule, Target, TraceTables
from sampler.summary import gridded_deposits, summarize
from tests.conftest import straight_survey

PRIORS = Priors(east_range=(-1000.0, 1000.0), north_range=(-3000.0, 3000.0), width_max=500.0, rate_max=1.0, m_max=4)


def _target(n=5, use_likelihood=True, priors=PRIORS, noise=0.0, seed=0) -> Target:
    survey = straight_survey(n=n, spacing=40.0, wind=(0.0, 5.0))
    y = survey.concentrations + np.random.default_rng(seed).normal(0.0, noise, n) if noise else survey.concentrations
    survey = survey.with_concentrations(y)
    return Target(
        positions=survey.positions,
        wind=survey.wind,
        concentrations=survey.concentrations,
        background=mrf_background(survey, mu=1.0),
        priors=priors,
        geometry=PlumeGeometry(),
        use_likelihood=use_likelihood,
        sample_bias=False,
    )


def _state(target, locations, widths, rates, sigma=3.0) -> ChainState:
    return initial_state(target, locations, widths, rates, sigma=sigma)


def test_source_off_the_domain_has_zero_density():
    target = _target()
    state = _state(target, [[5000.0, 0.0]], [10.0], [0.1])
    assert log_posterior(state, target) == -np.inf


def test_zero_coupling_rate_does_not_matter():
    target = _target()
    # north of the track, downwind of every measurement
    a = _state(target, [[0.0, 2000.0]], [50.0], [0.1])
    b = _state(target, [[0.0, 2000.0]], [50.0], [0.2])
    assert not a.coupling.any()
    assert a.log_posterior == b.log_posterior


def test_log_posterior_term_by_term():
    target = _target(noise=2.0)
    source = Source(location=(100.0, -1500.0), half_width=80.0, emission_rate=0.3)
    state = _state(target, [source.location], [source.half_width], [source.emission_rate], sigma=2.5)
    beta = target.background.beta0 + np.linspace(-1.0, 1.0, target.n)
    state = refresh(state.evolve(beta=beta), target)

    geom = PlumeGeometry()
    predicted = []
    for i in range(target.n):
        measurement = Measurement(
            time=0.0,
            position=tuple(target.positions[i]),
            concentration=float(target.concentrations[i]),
            wind=tuple(target.wind[i]),
        )
        predicted.append(1e9 * coupling(measurement, source, geom) * source.emission_rate + beta[i])
    e = target.concentrations - np.array(predicted)
    J = target.background.precision.matrix.toarray()
    d = beta - target.background.beta0
    expected = (
        -target.n * math.log(2.5)
        - e @ e / (2 * 2.5 ** 2)
        - 0.5 * target.background.mu * d @ J @ d
        - math.log(PRIORS.source_volume)
        - math.log(PRIORS.m_max + 1)
        - math.log(2.5)
        - math.log(math.log(1000.0 / 0.01))
    )
    assert state.log_posterior == pytest.approx(expected, rel=1e-10)


def test_accept_handles_extremes(rng):
    assert accept(0.0, rng)
    assert accept(5.0, rng)
    assert not accept(-np.inf, rng)
    assert not accept(float("nan"), rng)


def test_location_off_domain_is_rejected():
    target = _target()
    state = _state(target, [[0.0, -1500.0]], [50.0], [0.1])
    tally = AcceptanceTally()
    scales = ProposalScales(location=1e8)
    rng = np.random.default_rng(3)
    for _ in range(20):
        state = mh_block_update(state, "locations", target, scales, rng, tally)
    np.testing.assert_array_equal(state.locations, [[0.0, -1500.0]])
    assert tally.proposed["locations"] == 20
    assert tally.accepted["locations"] == 0


def test_tiny_steps_are_always_accepted():
    target = _target(noise=2.0)
    state = _state(target, [[0.0, -1500.0]], [50.0], [0.1])
    tally = AcceptanceTally()
    scales = ProposalScales(rate=1e-12, width=1e-9)
    rng = np.random.default_rng(4)
    for _ in range(50):
        state = mh_block_update(state, "rates", target, scales, rng, tally)
        state = mh_block_update(state, "widths", target, scales, rng, tally)
    assert tally.rate("rates") == 1.0
    assert tally.rate("widths") == 1.0


def test_bias_step_across_pi_wraps():
    target = replace(_target(use_likelihood=False), sample_bias=True)
    start = refresh(_state(target, [[0.0, -1000.0]], [100.0], [0.2]).evolve(bias=math.pi - 0.01), target)
    scales = ProposalScales(bias=0.05)
    wrapped = 0
    for seed in range(20):
        expected = math.pi - 0.01 + np.random.default_rng(seed).normal(0.0, scales.bias)
        if expected > math.pi:
            expected -= 2.0 * math.pi
            wrapped += 1
        state = update_wind_bias(start, target, scales, np.random.default_rng(seed))
        assert -math.pi < state.bias <= math.pi
        assert state.bias == pytest.approx(expected, abs=1e-12)
    assert wrapped > 0


def test_wind_bias_update_recovers_injected_bias():
    survey = straight_survey(n=40, spacing=50.0, wind=(0.0, 5.0))
    priors = Priors(east_range=(0.0, 2000.0), north_range=(-3000.0, 0.0), width_max=500.0, m_max=2)
    base = Target(
        positions=survey.positions,
        wind=survey.wind,
        concentrations=survey.concentrations,
        background=mrf_background(survey, mu=1.0),
        priors=priors,
        sample_bias=True,
    )
    truth = math.radians(-18.0)
    geometry = base.geometry
    column = source_coupling(base, [[1000.0, -1500.0]], [50.0], truth, geometry.opening_angle_h, geometry.opening_angle_v)[:, 0]
    noise = np.random.default_rng(3).normal(0.0, 2.0, survey.n)
    target = replace(base, concentrations=1800.0 + 0.1 * column + noise)
    state = initial_state(target, [[1000.0, -1500.0]], [50.0], [0.1], beta=np.full(survey.n, 1800.0), sigma=2.0)
    scales = ProposalScales(bias=math.radians(0.2))
    rng = np.random.default_rng(9)
    draws = []
    for it in range(3000):
        state = update_wind_bias(state, target, scales, rng)
        if it >= 1000:
            draws.append(math.degrees(state.bias))
    low, high = np.percentile(draws, [2.5, 97.5])
    assert np.mean(draws) == pytest.approx(-18.0, abs=0.75)
    assert high - low <= 2.0


def test_scale_and_angle_walks_stay_in_support():
    target = replace(_target(noise=1.0), sample_angles=True)
    state = _state(target, [[0.0, -1000.0]], [100.0], [0.2])
    scales = ProposalScales(log_sigma=3.0, log_angle=1.0)
    rng = np.random.default_rng(8)
    lo, hi = PRIORS.angle_range
    tally = AcceptanceTally()
    for _ in range(300):
        state = update_sigma(state, target, scales, rng, tally)
        state = update_opening_angles(state, target, scales, rng, tally)
        assert PRIORS.sigma_range[0] <= state.sigma <= PRIORS.sigma_range[1]
        assert lo <= state.angle_h <= hi and lo <= state.angle_v <= hi
        assert np.isfinite(state.log_posterior)
    assert 0 < tally.accepted["angles"] < 300
    assert audit(state, target) <= AUDIT_TOLERANCE


def test_vanishing_scale_and_angle_steps_are_accepted():
    target = replace(_target(noise=1.0), sample_angles=True)
    start = _state(target, [[0.0, -1000.0]], [100.0], [0.2])
    scales = ProposalScales(log_sigma=1e-12, log_angle=1e-12)
    tally = AcceptanceTally()
    rng = np.random.default_rng(2)
    state = start
    for _ in range(20):
        state = update_sigma(state, target, scales, rng, tally)
        state = update_opening_angles(state, target, scales, rng, tally)
    assert tally.rate("sigma") == 1.0
    assert tally.rate("angles") == 1.0
    assert state.sigma == pytest.approx(start.sigma, rel=1e-9)
    assert state.angle_h == pytest.approx(start.angle_h, rel=1e-9)
    assert state.angle_v == pytest.approx(start.angle_v, rel=1e-9)


def _toy_background_target(mu=0.7) -> Target:
    J = np.array([[1.0, -1.0], [-1.0, 1.0]])
    model = BackgroundModel(
        kind="mrf",
        basis=sp.identity(2, format="csr"),
        beta=np.array([1800.0, 1800.0]),
        beta0=np.array([1800.0, 1800.0]),
        precision=SparsePrecision(matrix=sp.csr_matrix(J), root=sp.csr_matrix([[1.0, -1.0]])),
        mu=mu,
    )
    return Target(
        positions=np.array([[0.0, 0.0, 100.0], [50.0, 0.0, 100.0]]),
        wind=np.array([[0.0, 5.0], [0.0, 5.0]]),
        concentrations=np.array([1803.0, 1796.0]),
        background=model,
        priors=PRIORS,
        sample_bias=False,
    )


def test_zero_residual_conditional_mean_is_reference():
    target = _target()
    state = _state(target, np.zeros((0, 2)), [], [])
    precision, linear = background_conditional(state, target)
    mean = np.linalg.solve(precision.toarray(), linear)
    np.testing.assert_allclose(mean, target.background.beta0, atol=1e-8)


@pytest.mark.slow
def test_background_draws_match_conditional_moments():
    target = _toy_background_target()
    state = _state(target, np.zeros((0, 2)), [], [], sigma=2.0)
    precision, linear = background_conditional(state, target)
    covariance = np.linalg.inv(precision.toarray())
    mean = covariance @ linear
    rng = np.random.default_rng(7)
    draws = 20000
    samples = np.empty((draws, 2))
    for k in range(draws):
        state = gibbs_background(state, target, rng)
        samples[k] = state.beta
    standard_error = np.sqrt(np.diag(covariance) / draws)
    assert np.all(np.abs(samples.mean(axis=0) - mean) < 4 * standard_error)
    np.testing.assert_allclose(np.cov(samples.T), covariance, rtol=0.05, atol=0.05 * np.abs(covariance).max())


def test_sigma_mode_is_rms_residual():
    target = _target(n=200, noise=3.0, seed=11)
    state = _state(target, np.zeros((0, 2)), [], [])
    e = target.concentrations - target.background.beta0
    sigmas = np.linspace(0.5, 10.0, 2000)
    values = [log_posterior(state.evolve(sigma=s), target) for s in sigmas]
    # the log-uniform prior adds one more log sigma to the n of the likelihood
    assert sigmas[int(np.argmax(values))] == pytest.approx(math.sqrt(e @ e / (target.n + 1)), abs=0.01)


SPLIT_SCALES = ProposalScales(split_location=512.0, split_width=64.0, split_rate=0.5)


def test_split_then_coalesce_is_exact():
    target = _target(noise=1.0)
    state = _state(target, [[0.0, -1000.0]], [100.0], [0.5])
    draws = np.array([64.0, -32.0, 8.0, 0.125])
    children, forward = propose_split(state, target, SPLIT_SCALES, np.random.default_rng(0), index=0, draws=draws)
    np.testing.assert_array_equal(children.source_matrix(), [[64.0, -1032.0, 108.0, 0.625], [-64.0, -968.0, 92.0, 0.375]])
    parent, backward = propose_coalesce(children, target, SPLIT_SCALES, np.random.default_rng(0), pair=(0, 1))
    np.testing.assert_array_equal(parent.source_matrix(), state.source_matrix())
    assert backward == pytest.approx(-forward, abs=1e-9)
    assert parent.log_posterior == pytest.approx(state.log_posterior, abs=1e-9)


def test_split_ratio_carries_jacobian_and_draw_volume():
    widths = SPLIT_SCALES.split_widths
    expected = float(np.sum(np.log(widths))) + math.log(8.0) + math.log(1 * 2) - math.log(1)
    assert split_log_ratio(-10.0, -10.0, 1, 1, SPLIT_SCALES) == pytest.approx(expected)


def test_far_apart_rates_cannot_coalesce():
    target = _target()
    state = _state(target, [[0.0, -1000.0], [10.0, -1000.0]], [100.0, 100.0], [0.05, 0.9])
    assert coalescible_pairs(state.source_matrix(), SPLIT_SCALES) == []
    assert propose_coalesce(state, target, SPLIT_SCALES, np.random.default_rng(0)) is None


def test_birth_of_an_unseen_source_is_neutral():
    target = _target(noise=1.0)
    state = _state(target, [[0.0, -1000.0]], [100.0], [0.5])
    candidate, log_ratio = propose_birth(state, target, np.random.default_rng(0), source=(0.0, 2500.0, 40.0, 0.3))
    assert candidate.m == 2
    assert not candidate.coupling[:, 1].any()
    assert log_ratio == pytest.approx(0.0, abs=1e-9)
    _, back = propose_death(candidate, target, np.random.default_rng(0), index=1)
    assert back == pytest.approx(0.0, abs=1e-9)


def test_jumps_respect_size_limits():
    target = _target()
    empty = _state(target, np.zeros((0, 2)), [], [])
    assert propose_death(empty, target, np.random.default_rng(0)) is None
    assert propose_split(empty, target, SPLIT_SCALES, np.random.default_rng(0)) is None
    full = _state(target, [[0.0, -1000.0 - 10 * k] for k in range(PRIORS.m_max)], [50.0] * PRIORS.m_max, [0.1] * PRIORS.m_max)
    assert propose_birth(full, target, np.random.default_rng(0)) is None


def _schedule(**kwargs) -> Schedule:
    values = dict(iterations=40, burn_in=10, thin=1, background_thin=5, audit_every=10, log_every=1000)
    values.update(kwargs)
    return Schedule(**values)


def test_short_chain_records_snapshots():
    target = _target(noise=2.0)
    init = _state(target, [[0.0, -1000.0]], [100.0], [0.2])
    trace = run_chain(target, ProposalScales(), init, _schedule(), np.random.default_rng(5))
    assert trace.completed
    assert trace.snapshots == 30
    tables = trace.tables()
    assert list(tables.scalars["snapshot"]) == list(range(30))
    assert tables.background["snapshot"].nunique() == 6
    assert set(tables.acceptance["move"]) >= {"locations", "birth", "background"}
    assert (tables.scalars["chain"] == 0).all()


def test_audit_detects_stale_cache():
    target = _target(noise=2.0)
    state = _state(target, [[0.0, -1000.0]], [100.0], [0.2])
    assert audit(state, target) <= AUDIT_TOLERANCE
    assert audit(state.evolve(log_posterior=state.log_posterior + 1.0), target) > AUDIT_TOLERANCE


def test_start_outside_support_aborts():
    target = _target()
    init = _state(target, [[9000.0, 0.0]], [100.0], [0.2])
    with pytest.raises(ChainAbortedError):
        run_chain(target, ProposalScales(), init, _schedule(), np.random.default_rng(0))


def test_same_seed_same_chain():
    target = _target(noise=2.0)
    start = ChainStart(sources=None, grid=SourceGrid(origin=(-1000.0, -3000.0), cell_size=1000.0, nx=2, ny=6, rates=np.full(12, 0.05)), k=2)
    first = merge_traces(run_chains(target, ProposalScales(), start, _schedule(), seed=42))
    second = merge_traces(run_chains(target, ProposalScales(), start, _schedule(), seed=42))
    pd.testing.assert_frame_equal(first.scalars, second.scalars)
    pd.testing.assert_frame_equal(first.sources, second.sources)


@pytest.mark.slow
def test_prior_only_chain_recovers_uniform_source_count():
    priors = Priors(east_range=(-1000.0, 1000.0), north_range=(-3000.0, 3000.0), width_max=500.0, rate_max=1.0, m_max=3)
    target = _target(use_likelihood=False, priors=priors)
    init = _state(target, [[0.0, -1000.0]], [100.0], [0.2])
    schedule = Schedule(iterations=30000, burn_in=1000, thin=5, background_thin=1000, audit_every=1000, log_every=100000)
    trace = run_chain(target, ProposalScales(location=800.0, width=150.0, rate=0.3), init, schedule, np.random.default_rng(21))
    counts = trace.tables().scalars["m"].value_counts(normalize=True).reindex(range(4), fill_value=0.0)
    np.testing.assert_allclose(counts.to_numpy(), 0.25, atol=0.06)


def _far_field_target():
    """Sources confined to a 1 m box 20 km upwind, so every source has the same coupling column."""
    survey = straight_survey(n=5, spacing=40.0, wind=(0.0, 5.0))
    priors = Priors(east_range=(-0.5, 0.5), north_range=(-20000.5, -19999.5), width_max=1.0, rate_max=1.0, m_max=2)
    base = Target(
        positions=survey.positions,
        wind=survey.wind,
        concentrations=survey.concentrations,
        background=mrf_background(survey, mu=1.0),
        priors=priors,
        sample_bias=False,
    )
    geometry = base.geometry
    column = source_coupling(base, [[0.0, -20000.0]], [0.5], 0.0, geometry.opening_angle_h, geometry.opening_angle_v)[:, 0]
    return replace(base, concentrations=1800.0 + 0.7 * column), column


@pytest.mark.slow
def test_dimension_moves_match_enumerated_model_probabilities():
    target, column = _far_field_target()
    # with sigma = ||a|| / 4 the likelihood of a total rate S is exp(-(S - 0.7)^2 / (2 * 0.25^2))
    sigma = 0.25 * float(np.linalg.norm(column))

    def likelihood(total):
        return math.exp(-((total - 0.7) ** 2) / (2.0 * 0.25 ** 2))

    # m sources with uniform rates on [0, 1]: S is 0, uniform, or triangular on [0, 2]
    weights = np.array([
        likelihood(0.0),
        integrate.quad(likelihood, 0.0, 1.0)[0],
        integrate.quad(lambda s: s * likelihood(s), 0.0, 1.0)[0] + integrate.quad(lambda s: (2.0 - s) * likelihood(s), 1.0, 2.0)[0],
    ])
    expected = weights / weights.sum()
    single_mean = integrate.quad(lambda s: s * likelihood(s), 0.0, 1.0)[0] / weights[1]

    state = initial_state(target, [[0.0, -20000.0]], [0.5], [0.5], beta=np.full(target.n, 1800.0), sigma=sigma)
    scales = ProposalScales(location=0.3, width=0.3, rate=0.2, split_location=2.0, split_width=2.0, split_rate=0.5)
    rng = np.random.default_rng(17)
    burn_in, iterations = 1000, 201000
    models = np.empty(iterations - burn_in, dtype=int)
    single_rates = []
    for it in range(iterations):
        for block in BLOCKS:
            state = mh_block_update(state, block, target, scales, rng)
        state = dimension_move(state, target, scales, rng)
        if it >= burn_in:
            models[it - burn_in] = state.m
            if state.m == 1:
                single_rates.append(state.rates[0])

    batches = models.reshape(100, -1)
    for m, p in enumerate(expected):
        means = (batches == m).mean(axis=1)
        error = means.std(ddof=1) / math.sqrt(means.size)
        assert abs(means.mean() - p) <= 3.0 * error + 0.005, (m, means.mean(), p)
    assert np.mean(single_rates) == pytest.approx(single_mean, abs=0.01)


@pytest.mark.slow
def test_prior_only_marginals_match_their_priors():
    priors = Priors(east_range=(-1000.0, 1000.0), north_range=(-3000.0, 3000.0), width_max=500.0, rate_max=1.0, m_max=3)
    target = replace(_target(use_likelihood=False, priors=priors), sample_bias=True)
    init = _state(target, [[0.0, -1000.0]], [100.0], [0.2])
    schedule = Schedule(iterations=100000, burn_in=1000, thin=100, background_thin=1000, audit_every=1000, log_every=100000)
    scales = ProposalScales(location=2000.0, width=250.0, rate=0.5, log_sigma=3.0, bias=2.0)
    tables = run_chain(target, scales, init, schedule, np.random.default_rng(23)).tables()
    first = tables.sources.groupby("snapshot").first()
    marginals = [
        (first["east_m"], -1000.0, 2000.0),
        (first["north_m"], -3000.0, 6000.0),
        (first["half_width_m"], 0.0, 500.0),
        (first["rate_m3s"], 0.0, 1.0),
        (tables.scalars["bias_deg"], -180.0, 360.0),
        (np.log(tables.scalars["sigma_ppb"]), math.log(0.01), math.log(1000.0) - math.log(0.01)),
    ]
    for values, low, width in marginals:
        assert stats.kstest(values.to_numpy(), "uniform", args=(low, width)).pvalue > 0.01


def test_aborted_chain_keeps_its_trace_through_pickling():
    trace = ChainTrace(chain=3)
    trace.tally.record("birth", True)
    restored = pickle.loads(pickle.dumps(ChainAbortedError("stopped", trace=trace)))
    assert restored.message == "stopped"
    assert restored.trace.chain == 3
    assert restored.trace.tally.accepted["birth"] == 1


def test_worker_abort_carries_the_trace():
    target = _target()
    start = ChainStart(sources=SourceSet.from_arrays([[9000.0, 0.0]], [100.0], [0.2]))
    with pytest.raises(ChainAbortedError) as info:
        run_chains(target, ProposalScales(), start, _schedule(), seed=1, chains=2)
    assert info.value.trace is not None
    assert info.value.trace.chain == 0
    assert info.value.trace.snapshots == 0


def test_explicit_start_respects_the_source_bound():
    target = _target()
    sources = SourceSet.from_arrays([[0.0, -1000.0 - 10.0 * k] for k in range(PRIORS.m_max + 1)], 50.0, 0.1)
    with pytest.raises(ValueError, match="exceed"):
        initial_state_from_sources(sources, target)


def _tables(rows):
    scalars = pd.DataFrame({
        "chain": 0, "snapshot": [0, 1, 2], "iteration": [1, 2, 3], "m": [1, 1, 2],
        "sigma_ppb": [3.0, 3.1, 2.9], "bias_deg": 0.0, "angle_h_deg": 12.7, "angle_v_deg": 12.7,
        "total_rate_m3s": [0.1, 0.3, 0.4], "log_posterior": -1.0,
    })
    sources = pd.DataFrame(rows, columns=["snapshot", "east_m", "north_m", "half_width_m", "rate_m3s"])
    sources.insert(0, "chain", 0)
    sources.insert(2, "iteration", sources["snapshot"] + 1)
    empty = pd.DataFrame({"chain": [], "snapshot": [], "iteration": [], "measurement": [], "value_ppb": []})
    acceptance = pd.DataFrame({"chain": 0, "move": ["birth", "death"], "proposed": [4, 0], "accepted": [1, 0], "rate": [0.25, np.nan]})
    return TraceTables(scalars, sources, empty, empty, acceptance)


def test_deposits_and_quantile_maps():
    grid = SourceGrid(origin=(0.0, 0.0), cell_size=100.0, nx=2, ny=1)
    tables = _tables([
        (0, 50.0, 50.0, 10.0, 0.1),
        (1, 50.0, 50.0, 10.0, 0.3),
        (2, 50.0, 50.0, 10.0, 0.2),
        (2, 150.0, 50.0, 10.0, 0.2),
        (2, 999.0, 50.0, 10.0, 5.0),  # off the grid
    ])
    deposits = gridded_deposits(tables, grid)
    np.testing.assert_allclose(deposits, [[0.1, 0.0], [0.3, 0.0], [0.2, 0.2]])
    summary = summarize(tables, grid)
    np.testing.assert_allclose(summary.median, [0.2, 0.0])
    assert summary.scalars["snapshots"] == 3
    assert summary.acceptance.set_index("move").loc["birth", "rate"] == pytest.approx(0.25)
    assert np.isnan(summary.acceptance.set_index("move").loc["death", "rate"])
