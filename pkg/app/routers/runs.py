import json
import os

import aiofiles
from fastapi import APIRouter, Depends, HTTPException

from app.config import Settings, get_settings
from app.reports import MANIFEST_JSON, RISK_JSON
from app.schemas import RiskRecord, RunManifest

router = APIRouter(prefix="/api/runs", tags=["runs"])

# OUTPUT_DIR itself is listed under this name
CURRENT_RUN = "current"


def run_dir(output_dir: str, name: str) -> str:
    if name == CURRENT_RUN:
        return output_dir
    if name in ("", ".", "..") or os.sep in name or "/" in name:
        raise HTTPException(status_code=404, detail="Run not found")
    return os.path.join(output_dir, name)


async def read_run_file(output_dir: str, name: str, filename: str):
    path = os.path.join(run_dir(output_dir, name), filename)
    if not os.path.isfile(path):
        raise HTTPException(status_code=404, detail=f"{filename} not found for run '{name}'")
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        return json.loads(await f.read())


@router.get("", response_model=list[str])
async def list_runs(settings: Settings = Depends(get_settings)):
    """Finished report bundles, i.e. directories holding a run manifest."""
    output_dir = settings.OUTPUT_DIR
    if not os.path.isdir(output_dir):
        return []
    runs = [CURRENT_RUN] if os.path.isfile(os.path.join(output_dir, MANIFEST_JSON)) else []
    for entry in sorted(os.scandir(output_dir), key=lambda e: e.name):
        if entry.is_dir() and os.path.isfile(os.path.join(entry.path, MANIFEST_JSON)):
            runs.append(entry.name)
    return runs


@router.get("/{name}/manifest", response_model=RunManifest)
async def get_manifest(name: str, settings: Settings = Depends(get_settings)):
    return await read_run_file(settings.OUTPUT_DIR, name, MANIFEST_JSON)


@router.get("/{name}/risk", response_model=list[RiskRecord])
async def get_risk(name: str, settings: Settings = Depends(get_settings)):
    return await read_run_file(settings.OUTPUT_DIR, name, RISK_JSON)
