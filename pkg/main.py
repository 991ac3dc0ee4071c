from fastapi import FastAPI
from api.v1 import api_router
from fastapi.middleware.cors import CORSMiddleware

from core.config import settings
from core.logging import configure_logging

configure_logging(settings.LOG_LEVEL, settings.LOG_FILE)

# Create a FastAPI application instance
app = FastAPI(title="plumeseek")

# Include the API routes from the v1 submodule
app.include_router(api_router)

# Define allowed origins for CORS
origins = ["*"]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/")
def root():
    """
    Handler for the root endpoint.

    Returns:
        dict: A dictionary indicating the status of the service.
    """
    return {"status": "ok", "service": "plumeseek"}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
