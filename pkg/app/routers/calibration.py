import io

from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile
from pydantic import TypeAdapter, ValidationError

from app.calibration import fit_correction, load_grey_reference, measure_grey_patches
from app.config import Settings, get_settings
from app.errors import CranberryError
from app.imaging import read_png
from app.schemas import GreyPatchMeasurement, PatchRect, RadiometricCorrection

router = APIRouter(prefix="/api/calibration", tags=["calibration"])

_patch_list = TypeAdapter(list[PatchRect])


@router.post("", response_model=RadiometricCorrection)
async def calibrate_card(
    card: UploadFile = File(...),
    patches: str = Form(...),
    session_id: str = Form(""),
    settings: Settings = Depends(get_settings),
):
    """Fit a session correction from an uploaded grey-card image."""
    try:
        rects = _patch_list.validate_json(patches)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=f"Invalid patch rectangles: {e}")

    content = await card.read()
    try:
        image = read_png(io.BytesIO(content), image_id=card.filename or "card")
    except OSError:
        raise HTTPException(status_code=400, detail="Card image could not be decoded")

    try:
        reference = load_grey_reference(settings.GREY_REFERENCE_PATH)
        measured = measure_grey_patches(image, rects, session_id=session_id)
        return fit_correction(measured, reference)
    except CranberryError as e:
        raise HTTPException(status_code=400, detail=e.detail)


@router.post("/fit", response_model=RadiometricCorrection)
async def fit_measurement(measured: GreyPatchMeasurement, settings: Settings = Depends(get_settings)):
    try:
        reference = load_grey_reference(settings.GREY_REFERENCE_PATH)
        return fit_correction(measured, reference)
    except CranberryError as e:
        raise HTTPException(status_code=400, detail=e.detail)
