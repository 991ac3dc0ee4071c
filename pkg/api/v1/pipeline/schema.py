from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class PipelineRequest(BaseModel):
    out_dir: str
    config_path: Optional[str] = None
    overrides: List[str] = []
    seed: Optional[int] = None
    chains: int = Field(1, ge=1)
    render: bool = False
    survey_path: Optional[str] = None
    init_path: Optional[str] = None


class StageResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    stage: str
    out_dir: str
    artifacts: List[str]
    summary: Dict[str, Any] = {}
