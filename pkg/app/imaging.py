import datetime as dt
import json
import logging
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from pydantic import TypeAdapter, ValidationError

from app.errors import DatasetError, ImagingError
from app.models import CropGrid, Image
from app.schemas import (
    CaptureMeta,
    DatasetEntry,
    DatasetIndex,
    DatasetSummary,
    PointAnnotation,
    Variety,
)

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"
ANNOTATIONS_FILE = "annotations.json"
BOG_FILE = "bog.json"

_annotation_list = TypeAdapter(list[PointAnnotation])


def read_png(path: str | os.PathLike, image_id: str = "", calibrated: bool = False) -> Image:
    with PILImage.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(data, calibrated=calibrated, image_id=image_id)


def write_png(image: Image, path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    data = np.round(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def clamp_unit(image: Image) -> Image:
    if not np.all(np.isfinite(image.pixels)):
        raise ImagingError(f"non-finite pixel in image '{image.image_id}'")
    return image.with_pixels(np.clip(image.pixels, 0.0, 1.0))


def tile_frame(frame: Image, grid: CropGrid) -> list[Image]:
    """Split a frame into non-overlapping crops in row-major order.

    Margin pixels beyond the last full row/column of crops are dropped. A
    frame that is exactly one crop keeps its image id.
    """
    if frame.width < grid.crop_w or frame.height < grid.crop_h:
        raise ImagingError(
            f"frame '{frame.image_id}' ({frame.width}x{frame.height}) is smaller "
            f"than one {grid.crop_w}x{grid.crop_h} crop"
        )
    grid = grid.resolve(frame.width, frame.height)
    if (
        grid.cols < 1
        or grid.rows < 1
        or grid.cols * grid.crop_w > frame.width
        or grid.rows * grid.crop_h > frame.height
    ):
        raise ImagingError(f"crop grid {grid.cols}x{grid.rows} does not fit frame '{frame.image_id}'")

    single = grid.cols == 1 and grid.rows == 1
    crops = []
    for row in range(grid.rows):
        for col in range(grid.cols):
            x0, y0 = col * grid.crop_w, row * grid.crop_h
            view = frame.pixels[y0 : y0 + grid.crop_h, x0 : x0 + grid.crop_w]
            crops.append(
                Image(
                    view,
                    calibrated=frame.calibrated,
                    image_id=frame.image_id if single else f"{frame.image_id}@r{row}c{col}",
                    origin=(frame.origin[0] + x0, frame.origin[1] + y0),
                )
            )
    return crops


def points_in_crop(annotation: PointAnnotation, crop: Image) -> PointAnnotation:
    x0, y0 = crop.origin
    points = [
        (x - x0, y - y0)
        for x, y in annotation.points
        if x0 <= x < x0 + crop.width and y0 <= y < y0 + crop.height
    ]
    return PointAnnotation(image_id=crop.image_id, points=points)


def read_bog_variety(bog_dir: Path) -> Variety | None:
    path = bog_dir / BOG_FILE
    if not path.exists():
        logger.warning("bog %s has no %s, variety unknown", bog_dir.name, BOG_FILE)
        return None
    try:
        return Variety(json.loads(path.read_text(encoding="utf-8"))["variety"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed bog file {path}: {e}") from e


def _read_annotations(path: Path) -> dict[str, PointAnnotation]:
    if not path.exists():
        return {}
    try:
        annotations = _annotation_list.validate_json(path.read_bytes())
    except ValidationError as e:
        raise DatasetError(f"malformed annotation file {path}: {e}") from e
    return {a.image_id.rsplit("/", 1)[-1]: a for a in annotations}


def load_dataset(root_path: str | os.PathLike) -> DatasetIndex:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")

    entries: list[DatasetEntry] = []
    for bog_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        variety = read_bog_variety(bog_dir)
        for date_dir in sorted(p for p in bog_dir.iterdir() if p.is_dir()):
            try:
                day = dt.date.fromisoformat(date_dir.name)
            except ValueError:
                logger.warning("skipping %s: not a YYYY-MM-DD directory", date_dir)
                continue
            frames_dir = date_dir / FRAMES_DIR
            if not frames_dir.is_dir():
                continue
            annotations = _read_annotations(date_dir / ANNOTATIONS_FILE)
            for frame in sorted(frames_dir.glob("*.png")):
                image_id = f"{bog_dir.name}/{date_dir.name}/{frame.stem}"
                with PILImage.open(frame) as im:
                    width, height = im.size
                annotation = annotations.pop(frame.stem, None)
                if annotation is not None:
                    outside = annotation.out_of_bounds(width, height)
                    if outside:
                        raise DatasetError(
                            f"annotation point {outside[0]} lies outside image '{image_id}' "
                            f"({width}x{height})"
                        )
                    annotation = PointAnnotation(image_id=image_id, points=annotation.points)
                entries.append(
                    DatasetEntry(
                        image_id=image_id,
                        path=str(frame),
                        width=width,
                        height=height,
                        meta=CaptureMeta(
                            bog_id=bog_dir.name, variety=variety, date=day, source_frame=frame.name
                        ),
                        annotation=annotation,
                    )
                )
            for stem in annotations:
                logger.warning("annotation for unknown frame '%s' in %s", stem, date_dir)

    if not entries:
        logger.warning("dataset %s holds no frames", root)
    else:
        labeled = sum(e.labeled for e in entries)
        logger.info("indexed %d frames (%d labeled) under %s", len(entries), labeled, root)
    return DatasetIndex(root=str(root), entries=entries)


def load_frame(entry: DatasetEntry) -> Image:
    return read_png(entry.path, image_id=entry.image_id)


def save_index(index: DatasetIndex, path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Path(path).write_text(index.model_dump_json(indent=2), encoding="utf-8")


def load_index(path: str | os.PathLike) -> DatasetIndex:
    try:
        return DatasetIndex.model_validate_json(Path(path).read_bytes())
    except (OSError, ValidationError) as e:
        raise DatasetError(f"cannot read dataset index {path}: {e}") from e


def dataset_summary(index: DatasetIndex) -> DatasetSummary:
    dates = sorted({e.meta.date for e in index.entries})
    varieties = {}
    for e in index.entries:
        varieties[e.meta.bog_id] = e.meta.variety.value if e.meta.variety else None
    return DatasetSummary(
        total_images=len(index.entries),
        labeled_images=sum(e.labeled for e in index.entries),
        bogs=sorted(varieties),
        varieties=varieties,
        first_date=dates[0] if dates else None,
        last_date=dates[-1] if dates else None,
        dates=dates,
    )
