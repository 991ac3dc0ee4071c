from fastapi import APIRouter
from api.v1.pipeline.router import PipelineRouter

api_router = APIRouter()

api_router.include_router(PipelineRouter().router)

@api_router.get("/v1")
def index():
	return {"status": "ok"}
