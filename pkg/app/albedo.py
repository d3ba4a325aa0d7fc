import csv
import datetime as dt
import logging
import os
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from skimage.color import rgb2lab
from sklearn.cluster import KMeans, kmeans_plusplus
from sklearn.metrics import pairwise_distances_argmin

from app.errors import ClusteringError
from app.models import BerryInstance, Image, SegmentationMask
from app.schemas import (
    N_CLASSES,
    BerryClassification,
    CaptureMeta,
    ClassHistogram,
    ColorClassModel,
    redness,
)

logger = logging.getLogger(__name__)

MAX_ITER = 300
TOL = 1e-6
HISTOGRAM_FIELDS = ["bog", "date", "c1", "c2", "c3", "c4", "c5", "count"]


def to_color_space(rgb: np.ndarray, color_space: str) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    if color_space == "lab":
        return rgb2lab(rgb.reshape(-1, 1, 3)).reshape(-1, 3)
    return rgb


def sample_berry_pixels(
    masks: list[SegmentationMask], images: list[Image], n: int, seed: int
) -> np.ndarray:
    """Uniform sample without replacement of n berry pixels, shape (n, 3).

    Returns every berry pixel, instance by instance, when fewer than n exist.
    """
    if n < 1:
        raise ClusteringError(f"sample size must be positive, got {n}")
    if len(masks) != len(images):
        raise ClusteringError(f"{len(masks)} masks for {len(images)} images")

    chunks = []
    for mask, image in zip(masks, images):
        if mask.ids.shape != image.pixels.shape[:2]:
            raise ClusteringError(f"mask does not match image '{image.image_id}'")
        for inst in mask.instances:
            chunks.append(image.pixels[inst.pixels[:, 1], inst.pixels[:, 0]])
    pool = np.concatenate(chunks) if chunks else np.empty((0, 3))

    if len(pool) <= n:
        if len(pool) < n:
            logger.warning("only %d berry pixels available, %d requested", len(pool), n)
        return pool
    rng = np.random.default_rng(seed)
    return pool[rng.choice(len(pool), size=n, replace=False)]


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[float]]:
    history: list[float] = []
    k = len(centers)
    for _ in range(MAX_ITER):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))

        sizes = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=x[:, c], minlength=k) for c in range(x.shape[1])], axis=1)
        moved = centers.copy()
        filled = sizes > 0
        # empty clusters keep their centre
        moved[filled] = sums[filled] / sizes[filled, None]
        shift = float(np.max(np.linalg.norm(moved - centers, axis=1)))
        centers = moved
        if shift < TOL:
            break

    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return centers, labels, history


def build_color_model(pixels: np.ndarray, k: int, seed: int, color_space: str = "rgb") -> ColorClassModel:
    """k-means over berry pixels, then the k centres grouped into 5 classes green to red.

    Centres are grouped by a 1-D k-means (k=5) on their redness, weighted by
    cluster size, so every class is a contiguous redness band.
    """
    if k < N_CLASSES:
        raise ClusteringError(f"k must be at least {N_CLASSES}, got {k}")
    rgb = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if len(rgb) < k:
        raise ClusteringError(f"{len(rgb)} pixels cannot form {k} clusters")
    if len(np.unique(rgb, axis=0)) < N_CLASSES:
        raise ClusteringError(f"< {N_CLASSES} distinct centroids: too few distinct pixel colors")

    x = to_color_space(rgb, color_space)
    init, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    centers, labels, history = _lloyd(x, init)
    sizes = np.bincount(labels, minlength=k)

    if color_space == "rgb":
        centers_rgb = centers
    else:
        centers_rgb = np.array(
            [rgb[labels == j].mean(axis=0) if sizes[j] else np.full(3, np.nan) for j in range(k)]
        )
        if np.isnan(centers_rgb).any():
            raise ClusteringError("empty cluster in Lab space")

    if len(np.unique(np.round(centers, 12), axis=0)) < N_CLASSES:
        raise ClusteringError(f"< {N_CLASSES} distinct centroids after clustering")
    rho = np.array([redness(c) for c in centers_rgb])
    if len(np.unique(rho)) < N_CLASSES:
        raise ClusteringError(f"< {N_CLASSES} distinct centroid rednesses")

    bands = KMeans(n_clusters=N_CLASSES, n_init=10, random_state=seed).fit(
        rho.reshape(-1, 1), sample_weight=np.maximum(sizes, 1)
    )
    if len(set(bands.labels_)) != N_CLASSES:
        raise ClusteringError("redness grouping left an albedo class empty")
    rank = np.argsort(np.argsort(bands.cluster_centers_.ravel()))
    class_map = [int(rank[b]) + 1 for b in bands.labels_]

    class_centroids = []
    for cls in range(1, N_CLASSES + 1):
        members = [j for j, c in enumerate(class_map) if c == cls]
        weights = sizes[members] if sizes[members].sum() > 0 else None
        class_centroids.append(tuple(float(v) for v in np.average(centers_rgb[members], axis=0, weights=weights)))

    try:
        model = ColorClassModel(
            centroids=[tuple(float(v) for v in c) for c in centers],
            centroids_rgb=[tuple(float(v) for v in c) for c in centers_rgb],
            class_map=class_map,
            class_centroids=class_centroids,
            seed=seed,
            k=k,
            color_space=color_space,
            cluster_sizes=[int(s) for s in sizes],
            objective_history=history,
        )
    except ValidationError as e:
        raise ClusteringError(f"invalid color model: {e}") from e
    logger.info(
        "color model: k=%d, %d Lloyd iterations, objective %.4f, classes per centroid %s",
        k,
        len(history) - 1,
        history[-1],
        class_map,
    )
    return model


def classify_pixels(rgb: np.ndarray, model: ColorClassModel) -> np.ndarray:
    """Albedo class (1..5) of every pixel through its nearest raw centroid."""
    x = to_color_space(rgb, model.color_space)
    nearest = pairwise_distances_argmin(x, np.asarray(model.centroids))
    return np.asarray(model.class_map)[nearest]


def vote(classes: np.ndarray) -> tuple[int, list[float]]:
    counts = np.bincount(np.asarray(classes), minlength=N_CLASSES + 1)[1:]
    fractions = counts / counts.sum()
    # argmax over the reversed votes picks the reddest of tied classes
    winner = N_CLASSES - int(np.argmax(counts[::-1]))
    return winner, [float(f) for f in fractions]


def classify_berry(instance: BerryInstance, image: Image, model: ColorClassModel) -> BerryClassification:
    if len(instance.pixels) == 0:
        raise ClusteringError(f"berry {instance.id} has no pixels")
    xs, ys = instance.pixels[:, 0], instance.pixels[:, 1]
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= image.width or ys.max() >= image.height:
        raise ClusteringError(f"berry {instance.id} lies outside image '{image.image_id}'")
    albedo_class, fractions = vote(classify_pixels(image.pixels[ys, xs], model))
    return BerryClassification(instance_id=instance.id, albedo_class=albedo_class, vote_fractions=fractions)


def class_histogram(classifications: list[BerryClassification], meta: CaptureMeta) -> ClassHistogram:
    for c in classifications:
        if (c.bog_id is not None and c.bog_id != meta.bog_id) or (c.date is not None and c.date != meta.date):
            raise ClusteringError(
                f"berry {c.instance_id} belongs to {c.bog_id} {c.date}, not {meta.bog_id} {meta.date}"
            )
    total = len(classifications)
    counts = np.zeros(N_CLASSES)
    for c in classifications:
        counts[c.albedo_class - 1] += 1
    fractions = counts / total if total else counts
    return ClassHistogram(
        bog_id=meta.bog_id,
        date=meta.date,
        variety=meta.variety,
        fractions=[float(f) for f in fractions],
        berry_count=total,
    )


def save_color_model(model: ColorClassModel, path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Path(path).write_text(model.model_dump_json(indent=2), encoding="utf-8")


def load_color_model(path: str | os.PathLike) -> ColorClassModel:
    try:
        return ColorClassModel.model_validate_json(Path(path).read_bytes())
    except (OSError, ValidationError) as e:
        raise ClusteringError(f"cannot load color model {path}: {e}") from e


def write_histograms_csv(hists: list[ClassHistogram], path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(HISTOGRAM_FIELDS)
        for h in hists:
            writer.writerow([h.bog_id, h.date.isoformat(), *(f"{v:.6f}" for v in h.fractions), h.berry_count])


def read_histograms_csv(path: str | os.PathLike) -> list[ClassHistogram]:
    """Histograms back from CSV; fractions are renormalised to undo rounding."""
    hists = []
    try:
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                fractions = np.array([float(row[f"c{i}"]) for i in range(1, N_CLASSES + 1)])
                count = int(row["count"])
                if count > 0:
                    fractions = fractions / fractions.sum()
                hists.append(
                    ClassHistogram(
                        bog_id=row["bog"],
                        date=dt.date.fromisoformat(row["date"]),
                        fractions=[float(v) for v in fractions],
                        berry_count=count,
                    )
                )
    except (OSError, KeyError, ValueError) as e:
        raise ClusteringError(f"cannot read histograms {path}: {e}") from e
    return hists
