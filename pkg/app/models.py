from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
from scipy import ndimage

from app.geometry import convexity_of_pixels
from app.schemas import InstanceRecord, MaskTable


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    arr = np.asarray(array, dtype=dtype)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """RGB raster, float channels, row-major (height, width, 3)."""

    pixels: np.ndarray
    calibrated: bool = False
    image_id: str = ""
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        pixels = _frozen(self.pixels, np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected an (height, width, 3) raster, got {pixels.shape}")
        if pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray, **changes) -> "Image":
        return replace(self, pixels=pixels, **changes)


@dataclass(frozen=True)
class CropGrid:
    crop_w: int = 456
    crop_h: int = 608
    cols: int | None = None
    rows: int | None = None

    def resolve(self, width: int, height: int) -> "CropGrid":
        cols = self.cols if self.cols is not None else width // self.crop_w
        rows = self.rows if self.rows is not None else height // self.crop_h
        return CropGrid(self.crop_w, self.crop_h, cols, rows)


class PixelLabel(IntEnum):
    BACKGROUND = 0
    FOREGROUND = 1
    IGNORE = 2


@dataclass(frozen=True, eq=False)
class PseudoMask:
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(self.labels, np.uint8))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def count(self, label: PixelLabel) -> int:
        return int(np.count_nonzero(self.labels == label))


@dataclass(frozen=True, eq=False)
class BerryInstance:
    id: int
    pixels: np.ndarray  # (n, 2) integer (x, y)
    centroid: tuple[float, float]
    area: int
    convexity: float
    mean_rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_record(self) -> InstanceRecord:
        return InstanceRecord(
            id=self.id,
            centroid=self.centroid,
            area=self.area,
            convexity=self.convexity,
            mean_rgb=self.mean_rgb,
        )


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    ids: np.ndarray  # (height, width) int32, 0 = background
    instances: list[BerryInstance] = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(self.ids, np.int32))

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def foreground(self) -> np.ndarray:
        return self.ids > 0

    def is_consistent(self) -> bool:
        rebuilt = np.zeros_like(self.ids)
        for inst in self.instances:
            xs, ys = inst.pixels[:, 0], inst.pixels[:, 1]
            if np.any(rebuilt[ys, xs] != 0):
                return False
            rebuilt[ys, xs] = inst.id
        return bool(np.array_equal(rebuilt, self.ids))

    def table(self) -> MaskTable:
        return MaskTable(
            image_id=self.image_id,
            width=self.width,
            height=self.height,
            instances=[inst.to_record() for inst in self.instances],
        )

    @classmethod
    def empty(cls, width: int, height: int, image_id: str = "") -> "SegmentationMask":
        return cls(np.zeros((height, width), dtype=np.int32), [], image_id)

    @classmethod
    def from_labels(
        cls,
        ids: np.ndarray,
        image: Image | None = None,
        image_id: str = "",
        convexities: dict[int, float] | None = None,
    ) -> "SegmentationMask":
        """Build the instance table from an id raster (0 = background)."""
        ids = np.asarray(ids, dtype=np.int32)
        instances = []
        objects = ndimage.find_objects(ids)
        for index, box in enumerate(objects):
            if box is None:
                continue
            label = index + 1
            ys, xs = np.nonzero(ids[box] == label)
            ys = ys + box[0].start
            xs = xs + box[1].start
            pixels = np.stack([xs, ys], axis=1).astype(np.int64)
            if convexities and label in convexities:
                cvx = convexities[label]
            else:
                cvx = convexity_of_pixels(pixels)
            if image is not None:
                mean_rgb = tuple(float(v) for v in image.pixels[ys, xs].mean(axis=0))
            else:
                mean_rgb = (0.0, 0.0, 0.0)
            instances.append(
                BerryInstance(
                    id=label,
                    pixels=pixels,
                    centroid=(float(xs.mean()), float(ys.mean())),
                    area=int(len(xs)),
                    convexity=cvx,
                    mean_rgb=mean_rgb,
                )
            )
        return cls(ids, instances, image_id or (image.image_id if image is not None else ""))
