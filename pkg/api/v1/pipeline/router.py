from pathlib import Path

from fastapi import APIRouter, Depends, HTTPException, status
from loguru import logger

from core.config import load_run_config, settings
from core.deps import get_output_root
from core.exceptions import ConfigError, PlumeseekError, UsageError
from .domain import PipelineDomain
from .repository import PipelineRepository
from .schema import PipelineRequest, StageResponse


class PipelineRouter:
    def __init__(self) -> None:
        self.__domain = PipelineDomain()
        self.__repository = PipelineRepository()

    def _run(self, stage: str, request: PipelineRequest, root: Path) -> StageResponse:
        out = Path(request.out_dir)
        if not out.is_absolute():
            out = root / out
        try:
            config = load_run_config(request.config_path, request.overrides, request.seed)
            if stage == "simulate":
                return self.__domain.run_simulate(config, out)
            if stage == "optimize":
                return self.__domain.run_optimize(config, out, request.survey_path)
            if stage == "infer":
                return self.__domain.run_infer(config, out, request.survey_path, request.init_path, request.chains)
            return self.__domain.run_report(config, out, request.survey_path, request.render, settings.RENDER_DPI)
        except (UsageError, ConfigError) as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=dict(e.record(), stage=stage))
        except PlumeseekError as e:
            logger.error(f"{stage} failed: {e}")
            record = dict(e.record(), stage=stage)
            self.__repository.write_error(record, out)
            raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=record)
        except Exception as e:
            logger.error(f"{stage} failed: {e}")
            record = {"error": type(e).__name__, "message": str(e), "stage": stage}
            self.__repository.write_error(record, out)
            raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=record)

    @property
    def router(self):
        """
        Get the API router for the pipeline stages.

        Returns:
            APIRouter: The API router.
        """
        api_router = APIRouter(prefix="/pipeline", tags=["Pipeline"], responses={404: {"description": "Not found"}})

        @api_router.post("/simulate", response_model=StageResponse)
        def simulate(request: PipelineRequest, root: Path = Depends(get_output_root)):
            """
            Generate a synthetic survey with ground truth.
            """
            return self._run("simulate", request, root)

        @api_router.post("/optimize", response_model=StageResponse)
        def optimize(request: PipelineRequest, root: Path = Depends(get_output_root)):
            """
            Fit the sparse gridded estimate and background.
            """
            return self._run("optimize", request, root)

        @api_router.post("/infer", response_model=StageResponse)
        def infer(request: PipelineRequest, root: Path = Depends(get_output_root)):
            """
            Sample the posterior over source sets.
            """
            return self._run("infer", request, root)

        @api_router.post("/report", response_model=StageResponse)
        def report(request: PipelineRequest, root: Path = Depends(get_output_root)):
            """
            Summarise the trace into maps, bands and a score.
            """
            return self._run("report", request, root)

        return api_router
