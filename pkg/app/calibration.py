import json
import logging
import os
from pathlib import Path

import numpy as np
from pydantic import TypeAdapter, ValidationError
from scipy.stats import trim_mean

from app.errors import CalibrationError
from app.imaging import read_png
from app.models import Image
from app.schemas import (
    MIN_PATCH_PIXELS,
    N_GREY_PATCHES,
    GreyPatchMeasurement,
    GreyReference,
    PatchRect,
    RadiometricCorrection,
    luminance,
)

logger = logging.getLogger(__name__)

CALIBRATION_FILE = "calibration.json"
CARD_FILE = "card.png"
PATCHES_FILE = "patches.json"

TRIM = 0.1

_patch_list = TypeAdapter(list[PatchRect])


def load_grey_reference(path: str | os.PathLike) -> GreyReference:
    """Read a grey reference, either ``{"values": [...]}`` or a bare 6-float array."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, list):
            data = {"values": data}
        return GreyReference.model_validate(data)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise CalibrationError(f"cannot load grey reference {path}: {e}") from e


def load_patch_rects(path: str | os.PathLike) -> list[PatchRect]:
    try:
        rects = _patch_list.validate_json(Path(path).read_bytes())
    except (OSError, ValidationError) as e:
        raise CalibrationError(f"cannot load patch rectangles {path}: {e}") from e
    if len(rects) != N_GREY_PATCHES:
        raise CalibrationError(f"expected {N_GREY_PATCHES} patch rectangles, got {len(rects)}")
    return rects


def measure_grey_patches(
    card_image: Image, patch_rects: list[PatchRect], session_id: str = ""
) -> GreyPatchMeasurement:
    """Trimmed mean (10% cut at each end, per channel) of every grey patch.

    Patches are expected lightest first.
    """
    if len(patch_rects) != N_GREY_PATCHES:
        raise CalibrationError(f"expected {N_GREY_PATCHES} patch rectangles, got {len(patch_rects)}")

    means, counts = [], []
    for i, rect in enumerate(patch_rects):
        if rect.x + rect.w > card_image.width or rect.y + rect.h > card_image.height:
            raise CalibrationError(
                f"patch {i + 1} ({rect.x},{rect.y},{rect.w},{rect.h}) lies outside the "
                f"{card_image.width}x{card_image.height} card image"
            )
        pixels = card_image.pixels[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w].reshape(-1, 3)
        n = len(pixels)
        kept = n - 2 * int(TRIM * n)
        if kept < MIN_PATCH_PIXELS:
            raise CalibrationError(
                f"patch {i + 1} keeps {kept} pixels after trimming, need at least {MIN_PATCH_PIXELS}"
            )
        means.append(tuple(float(v) for v in trim_mean(pixels, TRIM, axis=0)))
        counts.append(n)

    lum = [luminance(m) for m in means]
    for i, (a, b) in enumerate(zip(lum, lum[1:])):
        if a <= b:
            raise CalibrationError(
                f"grey patch luminance is not decreasing at patch {i + 2} ({a:.4f} <= {b:.4f}); "
                "patches must be listed lightest first"
            )
    return GreyPatchMeasurement(session_id=session_id, means=means, pixel_counts=counts)


def fit_correction(measured: GreyPatchMeasurement, reference: GreyReference) -> RadiometricCorrection:
    """Per-channel affine least squares mapping measured grey means onto the reference."""
    m = np.asarray(measured.means, dtype=np.float64)  # (6, 3)
    ref = np.asarray(reference.values, dtype=np.float64)

    gains, offsets = [], []
    for c, channel in enumerate("RGB"):
        x = m[:, c]
        dx = x - x.mean()
        sxx = float(dx @ dx)
        if sxx <= 1e-18:
            raise CalibrationError(f"singular fit: all grey means are equal in channel {channel}")
        gain = float(dx @ (ref - ref.mean())) / sxx
        if gain <= 0:
            raise CalibrationError(f"inverted response in channel {channel} (gain {gain:.4f})")
        gains.append(gain)
        offsets.append(float(ref.mean() - gain * x.mean()))

    fitted = m * np.asarray(gains) + np.asarray(offsets)
    residual = float(np.sqrt(np.mean((fitted - ref[:, None]) ** 2)))
    corr = RadiometricCorrection(
        session_id=measured.session_id,
        gain=tuple(gains),
        offset=tuple(offsets),
        residual_rms=residual,
        reference=list(reference.values),
    )
    logger.info(
        "session %s: gain=(%.4f, %.4f, %.4f) offset=(%.4f, %.4f, %.4f) rms=%.5f",
        measured.session_id or "?",
        *corr.gain,
        *corr.offset,
        residual,
    )
    return corr


def apply_correction(image: Image, corr: RadiometricCorrection) -> Image:
    if image.calibrated:
        raise CalibrationError(f"image '{image.image_id}' is already calibrated")
    gain = np.asarray(corr.gain, dtype=np.float64)
    offset = np.asarray(corr.offset, dtype=np.float64)
    return image.with_pixels(np.clip(image.pixels * gain + offset, 0.0, 1.0), calibrated=True)


def distort(image: Image, gain, offset) -> Image:
    """Simulate a camera response ``v * gain + offset`` (clamped); the inverse of a correction."""
    pixels = image.pixels * np.asarray(gain, dtype=np.float64) + np.asarray(offset, dtype=np.float64)
    return image.with_pixels(np.clip(pixels, 0.0, 1.0), calibrated=False)


def save_correction(corr: RadiometricCorrection, path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Path(path).write_text(corr.model_dump_json(indent=2), encoding="utf-8")


def load_correction(path: str | os.PathLike) -> RadiometricCorrection:
    try:
        return RadiometricCorrection.model_validate_json(Path(path).read_bytes())
    except (OSError, ValidationError) as e:
        raise CalibrationError(f"cannot load calibration {path}: {e}") from e


def session_correction(
    session_dir: str | os.PathLike, session_id: str, reference: GreyReference
) -> RadiometricCorrection | None:
    """Correction stored for a session directory, or fitted from its card image.

    Returns None when the session carries neither.
    """
    session_dir = Path(session_dir)
    stored = session_dir / CALIBRATION_FILE
    if stored.exists():
        return load_correction(stored)
    card, patches = session_dir / CARD_FILE, session_dir / PATCHES_FILE
    if card.exists() and patches.exists():
        measured = measure_grey_patches(read_png(card), load_patch_rects(patches), session_id)
        return fit_correction(measured, reference)
    return None
