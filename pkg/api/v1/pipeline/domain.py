import math
from pathlib import Path
from typing import Optional

import numpy as np
from loguru import logger

from background.chebyshev import cheby_spec_for_survey, chebyshev_background
from background.mrf import mrf_background
from background.schema import BackgroundModel
from core.config import RunConfig
from core.exceptions import ChainAbortedError, UsageError
from core.schema import Survey
from optimizer.schema import OptimizerConfig, SourceGrid
from optimizer.solver import solve
from sampler.chain import ChainStart, merge_traces, run_chains
from sampler.schema import Priors, ProposalScales, Schedule, Target
from sampler.summary import summarize
from synth.scenario import generate
from synth.schema import ScenarioSpec
from synth.scoring import score
from .repository import PipelineRepository
from .schema import StageResponse

OPTIMIZE_FILES = ("grid_spec.json", "grid_map.csv", "beta.csv", "optimize_summary.json")
TRACE_FILES = ("trace_scalars.csv", "trace_sources.csv", "trace_background.csv", "trace_residuals.csv", "acceptance.csv")


def build_background(config: RunConfig, survey: Survey, mu: Optional[float] = None) -> BackgroundModel:
    """Background model selected by ``background.kind``."""
    section = config.background
    weight = 1.0 if mu is None else mu
    if section.kind == "chebyshev":
        spec = cheby_spec_for_survey(
            survey,
            degrees=section.cheby_degrees,
            mu1=section.cheby_mu1,
            mu2=section.cheby_mu2,
            mu3=section.cheby_mu3,
            b0=section.beta0,
            grid_points=section.cheby_grid_points,
            beta0_percentile=section.beta0_percentile,
        )
        return chebyshev_background(survey, spec, weight)
    return mrf_background(survey, section.c_t, section.c_d, weight, section.beta0, section.beta0_percentile)


def source_grid(config: RunConfig) -> SourceGrid:
    section = config.optimizer
    return SourceGrid(
        origin=(section.origin_east_m, section.origin_north_m),
        cell_size=section.cell_size_m,
        nx=section.grid_nx,
        ny=section.grid_ny,
    )


def optimizer_config(config: RunConfig) -> OptimizerConfig:
    section = config.optimizer
    return OptimizerConfig(
        sigma=section.sigma_ppb,
        mu=config.background.mu,
        lam=section.lam,
        tau=section.tau,
        s_max=section.s_max,
        eta=section.eta,
        max_outer=section.max_outer,
        tol=section.tol,
        background_max_iter=section.background_max_iter,
        newton_max_iter=section.newton_max_iter,
        sources_max_iter=section.sources_max_iter,
        sources_tol=section.sources_tol,
    )


def priors_for(config: RunConfig, grid: SourceGrid) -> Priors:
    section = config.sampler
    east, north = grid.extent
    return Priors(
        east_range=east,
        north_range=north,
        width_max=section.width_max_m,
        rate_max=section.rate_max,
        sigma_range=(section.sigma_min_ppb, section.sigma_max_ppb),
        angle_range=(math.radians(section.angle_min_deg), math.radians(section.angle_max_deg)),
        m_max=section.m_max,
    )


def scales_for(config: RunConfig) -> ProposalScales:
    section = config.sampler
    return ProposalScales.from_steps(
        section.step_location_m,
        section.step_width_m,
        section.step_rate,
        log_sigma=section.step_log_sigma,
        bias=math.radians(section.step_bias_deg),
        log_angle=section.step_log_angle,
        split_location=section.split_location_m,
        split_width=section.split_width_m,
        split_rate=section.split_rate,
    )


def schedule_for(config: RunConfig) -> Schedule:
    section = config.sampler
    return Schedule(
        iterations=section.iterations,
        burn_in=section.burn_in,
        thin=section.thin,
        background_thin=section.background_thin,
        audit_every=section.audit_every,
        log_every=section.log_every,
        sample_bias=section.sample_bias,
        sample_angles=section.sample_angles,
    )


class PipelineDomain:
    def __init__(self) -> None:
        self.__repository = PipelineRepository()

    def _survey(self, out: Path, survey_path: Optional[str]) -> Survey:
        path = Path(survey_path) if survey_path else out / "survey.csv"
        if not path.is_file():
            raise UsageError(f"no survey at {path}; run simulate first or pass --survey")
        return self.__repository.ingest_survey(path)

    def _response(self, stage: str, out: Path, artifacts: list, summary: dict) -> StageResponse:
        return StageResponse(
            stage=stage,
            out_dir=str(out),
            artifacts=sorted(Path(p).name for p in artifacts),
            summary=summary,
        )

    def run_simulate(self, config: RunConfig, out: Path) -> StageResponse:
        """
        Generate a synthetic survey and its ground truth.

        Args:
            config (RunConfig): Run configuration; ``synth`` and ``plume`` sections apply.
            out (Path): Output directory.

        Returns:
            StageResponse: Written artifacts and a short summary.
        """
        out.mkdir(parents=True, exist_ok=True)
        spec = ScenarioSpec.from_config(config.synth, config.plume, config.seed)
        survey, truth = generate(spec, np.random.default_rng(config.seed))
        summary = {
            "measurements": survey.n,
            "sources": truth.sources.m,
            "peak_enhancement_ppb": float(np.max(truth.noiseless - truth.background)),
            "config": config.flat(),
        }
        artifacts = [self.__repository.write_survey(survey, out / "survey.csv")]
        artifacts += self.__repository.write_truth(truth, out)
        artifacts.append(self.__repository.write_json(summary, out / "simulate_summary.json"))
        return self._response("simulate", out, artifacts, summary)

    def run_optimize(self, config: RunConfig, out: Path, survey_path: Optional[str] = None) -> StageResponse:
        """
        Fit the gridded initial estimate.

        Returns:
            StageResponse: Grid map, background fit and objective trace.
        """
        out.mkdir(parents=True, exist_ok=True)
        survey = self._survey(out, survey_path)
        background = build_background(config, survey, config.background.mu)
        result = solve(
            survey,
            source_grid(config),
            background,
            optimizer_config(config),
            config.plume.geometry(),
            config.plume.source_height_m,
        )
        summary = dict(result.summary(), config=config.flat())
        artifacts = self.__repository.write_optimizer_result(result, survey, out)
        artifacts.append(self.__repository.write_json(summary, out / "optimize_summary.json"))
        return self._response("optimize", out, artifacts, summary)

    def run_infer(
        self,
        config: RunConfig,
        out: Path,
        survey_path: Optional[str] = None,
        init_path: Optional[str] = None,
        chains: int = 1,
    ) -> StageResponse:
        """
        Sample the posterior, starting from optimize output or explicit sources.

        Raises:
            UsageError: If neither optimize output nor ``init_path`` is available.
            ChainAbortedError: After the partial trace has been written.
        """
        out.mkdir(parents=True, exist_ok=True)
        survey = self._survey(out, survey_path)
        height = config.plume.source_height_m
        have_optimize = all((out / name).is_file() for name in OPTIMIZE_FILES)
        grid = source_grid(config)
        beta = None
        mu = config.background.mu
        if have_optimize:
            fitted_grid, beta, optimize_summary = self.__repository.read_optimizer_output(out)
            grid = fitted_grid
            if mu is None:
                mu = optimize_summary.get("mu")
        if init_path:
            start = ChainStart(sources=self.__repository.read_sources(init_path, height), beta=beta, sigma=config.optimizer.sigma_ppb)
        elif have_optimize:
            start = ChainStart(grid=grid, k=config.sampler.init_sources, beta=beta, sigma=config.optimizer.sigma_ppb)
        else:
            raise UsageError(f"infer needs optimize output in {out} or an --init source file")

        background = build_background(config, survey, mu)
        target = Target(
            positions=survey.positions,
            wind=survey.wind,
            concentrations=survey.concentrations,
            background=background,
            priors=priors_for(config, grid),
            geometry=config.plume.geometry(),
            source_height=height,
            sample_bias=config.sampler.sample_bias,
            sample_angles=config.sampler.sample_angles,
        )
        if start.sources is not None:
            try:
                start.sources.check_capacity(target.priors.m_max)
            except ValueError as e:
                raise UsageError(f"--init: {e}") from e
        schedule = schedule_for(config)
        logger.info(f"infer: {chains} chain(s), {schedule.iterations} iterations, burn-in {schedule.burn_in}")
        try:
            traces = run_chains(target, scales_for(config), start, schedule, config.seed, chains)
        except ChainAbortedError as e:
            if e.trace is not None:
                self.__repository.write_trace(merge_traces([e.trace]), out)
            raise
        tables = merge_traces(traces)
        artifacts = self.__repository.write_trace(tables, out)
        acceptance = tables.acceptance.groupby("move", sort=False)[["proposed", "accepted"]].sum()
        summary = {
            "chains": chains,
            "snapshots": int(len(tables.scalars)),
            "background_mu": background.mu,
            "acceptance": {
                move: (float(row.accepted / row.proposed) if row.proposed else None)
                for move, row in acceptance.iterrows()
            },
            "config": config.flat(),
        }
        artifacts.append(self.__repository.write_json(summary, out / "infer_summary.json"))
        return self._response("infer", out, artifacts, summary)

    def run_report(
        self,
        config: RunConfig,
        out: Path,
        survey_path: Optional[str] = None,
        render: bool = False,
        dpi: int = 120,
    ) -> StageResponse:
        """
        Summarise a trace into quantile maps, bands, acceptance rates and a score.

        Raises:
            UsageError: If no trace is present in ``out``.
        """
        if not all((out / name).is_file() for name in TRACE_FILES):
            raise UsageError(f"no trace in {out}; run infer first")
        tables = self.__repository.read_trace(out)
        grid = SourceGrid.from_spec(self.__repository.read_json(out / "grid_spec.json")) if (out / "grid_spec.json").is_file() else source_grid(config)
        survey_file = Path(survey_path) if survey_path else out / "survey.csv"
        concentrations = self.__repository.ingest_survey(survey_file).concentrations if survey_file.is_file() else None
        section = config.report
        posterior = summarize(tables, grid, concentrations, section.band_low, section.band_high)
        artifacts = self.__repository.write_summary(posterior, grid, out)
        summary = dict(posterior.scalars)

        truth = None
        if (out / "truth_sources.csv").is_file():
            truth = self.__repository.read_sources(out / "truth_sources.csv")
            report = score(posterior.median, truth, section.match_radius_m, grid, section.map_threshold)
            artifacts.append(self.__repository.write_json(report.model_dump(), out / "score.json"))
            summary["score"] = {"hits": report.hits, "misses": report.misses, "spurious": report.spurious}
        if render:
            artifacts += self.__repository.render(posterior, grid, out, dpi, truth)
        artifacts.append(self.__repository.write_json(summary, out / "report_summary.json"))
        return self._response("report", out, artifacts, summary)
