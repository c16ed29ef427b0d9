import logging
import os
from contextlib import asynccontextmanager

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from api.admin_endpoints import router as admin_router
from api.dependencies import output_root
from api.endpoints import router as experiment_router
from core.models_loader import apply_thread_setting, get_device, unload_models
from setting_api.settings_management import create_preference_file_if_not_exists

load_dotenv()

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SERVICE_VERSION = "1.0.0"


def cors_origins():
    """Comma-separated IPL_CORS_ORIGINS, or every origin when unset."""
    raw = os.getenv("IPL_CORS_ORIGINS", "*")
    return [origin.strip() for origin in raw.split(",") if origin.strip()]


@asynccontextmanager
async def lifespan(app: FastAPI):
    if create_preference_file_if_not_exists():
        logger.info("Application settings file created")
    apply_thread_setting()
    app.state.device = get_device()
    logger.info(f"Serving runs from {output_root()} on device '{app.state.device}'")

    yield

    # checkpoints cached by evaluate calls
    unload_models()


app = FastAPI(
    title="IPL Debiasing Toolkit",
    description="Train, evaluate and sweep popularity-debiased recommenders",
    version=SERVICE_VERSION,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=cors_origins(),
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)

app.include_router(experiment_router)
app.include_router(admin_router)


@app.get("/")
async def root():
    return {"message": "IPL Debiasing Toolkit API", "version": SERVICE_VERSION, "docs": "/docs"}


@app.get("/health")
async def health_check():
    return {"status": "healthy", "device": getattr(app.state, "device", None)}


if __name__ == "__main__":
    import uvicorn
    host = os.getenv("HOST", "127.0.0.1")
    port = int(os.getenv("PORT", 8000))
    logger.info(f"Starting server on {host}:{port}")
    uvicorn.run(app, host=host, port=port)
