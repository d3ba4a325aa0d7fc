import datetime as dt

import numpy as np

from app.models import Image
from app.schemas import ClassHistogram, ColorClassModel, PixelScorer
from app.synth import default_palette

GREEN = (0.2, 0.5, 0.2)
RED = (0.8, 0.15, 0.15)


def paint_disks(
    width: int,
    height: int,
    centers,
    radius: int,
    color=RED,
    background=GREEN,
    calibrated: bool = True,
    image_id: str = "",
) -> Image:
    """Hard-edged disks (x^2 + y^2 <= r^2 around integer centres) on a flat background."""
    pixels = np.empty((height, width, 3))
    pixels[:] = background
    yy, xx = np.mgrid[0:height, 0:width]
    for cx, cy in centers:
        pixels[(xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2] = color
    return Image(pixels, calibrated=calibrated, image_id=image_id)


def red_threshold_scorer(cut: float = 0.5, steepness: float = 20.0) -> PixelScorer:
    """Scorer whose score crosses 0.5 exactly where the red channel crosses ``cut``."""
    return PixelScorer(weights=[-steepness * cut, steepness, 0, 0, 0, 0, 0], trained=True, epochs=1)


def histogram(bog: str, date: dt.date, red: float, variety=None) -> ClassHistogram:
    return ClassHistogram(
        bog_id=bog,
        date=date,
        variety=variety,
        fractions=[1.0 - red, 0.0, 0.0, red / 2, red / 2],
        berry_count=100,
    )


def palette_model(palette=None) -> ColorClassModel:
    classes = [tuple(c) for c in (palette or default_palette()).classes]
    return ColorClassModel(
        centroids=classes,
        centroids_rgb=classes,
        class_map=[1, 2, 3, 4, 5],
        class_centroids=classes,
        seed=0,
        k=5,
    )
