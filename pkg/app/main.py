import logging
import os
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles

from app import __version__
from app.config import get_settings
from app.routers import calibration as calibration_router
from app.routers import ripeness as ripeness_router
from app.routers import runs as runs_router

logger = logging.getLogger(__name__)

settings = get_settings()


@asynccontextmanager
async def lifespan(app: FastAPI):
    os.makedirs(settings.OUTPUT_DIR, exist_ok=True)
    logger.info("serving report bundles from %s", settings.OUTPUT_DIR)
    yield


app = FastAPI(title="Cranberry Ripening API", version=__version__, lifespan=lifespan)

cors_origins = [origin.strip() for origin in settings.CORS_ORIGINS.split(",")]

app.add_middleware(
    CORSMiddleware,
    allow_origins=cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Report bundles (CSV, SVG, JSON)
os.makedirs(settings.OUTPUT_DIR, exist_ok=True)
app.mount("/reports", StaticFiles(directory=settings.OUTPUT_DIR), name="reports")

# Routers
app.include_router(calibration_router.router)
app.include_router(ripeness_router.router)
app.include_router(runs_router.router)
