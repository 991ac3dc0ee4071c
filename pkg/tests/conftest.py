import numpy as np
import pytest

from core.schema import Survey


def straight_survey(n: int = 6, spacing: float = 50.0, dt: float = 1.0, wind=(0.0, 5.0), altitude: float = 100.0, base: float = 1800.0) -> Survey:
    """Eastbound straight track under a uniform wind."""
    times = dt * np.arange(n, dtype=float)
    positions = np.column_stack([spacing * np.arange(n), np.zeros(n), np.full(n, altitude)])
    return Survey(
        times=times,
        positions=positions,
        concentrations=np.full(n, base),
        wind=np.tile(np.asarray(wind, dtype=float), (n, 1)),
    )


@pytest.fixture
def survey() -> Survey:
    return straight_survey()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def write_short_trace(out) -> None:
    """A real 20-snapshot trace of one source under the straight track, written to ``out``."""
    from api.v1.pipeline.repository import PipelineRepository
    from background.mrf import mrf_background
    from sampler.chain import initial_state, merge_traces, run_chain
    from sampler.schema import Priors, ProposalScales, Schedule, Target

    survey = straight_survey(n=8, spacing=100.0)
    target = Target(
        positions=survey.positions,
        wind=survey.wind,
        concentrations=survey.concentrations,
        background=mrf_background(survey),
        priors=Priors(east_range=(0.0, 2000.0), north_range=(-2000.0, 0.0), width_max=500.0, m_max=3),
        sample_bias=False,
    )
    init = initial_state(target, [[300.0, -1000.0]], [50.0], [0.1])
    schedule = Schedule(iterations=30, burn_in=10, background_thin=5, audit_every=10, log_every=100)
    trace = run_chain(target, ProposalScales(), init, schedule, np.random.default_rng(0))
    out.mkdir(parents=True, exist_ok=True)
    PipelineRepository().write_trace(merge_traces([trace]), out)
