import logging
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from pydantic import ValidationError
from scipy import ndimage
from scipy.special import expit
from skimage.feature import peak_local_max
from skimage.segmentation import watershed

from app.errors import SegmentationError
from app.geometry import convexity_of_pixels
from app.models import BerryInstance, Image, PixelLabel, PseudoMask, SegmentationMask
from app.schemas import EvalReport, ImageEval, MaskTable, PixelScorer, PointAnnotation, SegParams

logger = logging.getLogger(__name__)

N_FEATURES = 7
MAX_INSTANCE_ID = np.iinfo(np.uint16).max
# Distance-transform maxima below this share of the component's maximum are not seeds
PEAK_THRESHOLD_REL = 0.5


# --- pseudo-masks ---


def build_pseudo_mask(points: PointAnnotation, shape: tuple[int, int], r_fg: int, r_ig: int) -> PseudoMask:
    """Foreground disks of radius r_fg around each point, an Ignore ring of width r_ig around them."""
    if r_fg < 1 or r_ig < 0:
        raise SegmentationError(f"invalid pseudo-mask radii r_fg={r_fg}, r_ig={r_ig}")
    width, height = shape
    labels = np.full((height, width), PixelLabel.BACKGROUND, dtype=np.uint8)
    outside = points.out_of_bounds(width, height)
    if outside:
        raise SegmentationError(f"point {outside[0]} lies outside the {width}x{height} image '{points.image_id}'")
    if not points.points:
        return PseudoMask(labels)

    seeds = np.ones((height, width), dtype=bool)
    for x, y in points.points:
        seeds[int(y), int(x)] = False
    dist = ndimage.distance_transform_edt(seeds)
    labels[dist <= r_fg + r_ig] = PixelLabel.IGNORE
    labels[dist <= r_fg] = PixelLabel.FOREGROUND
    return PseudoMask(labels)


# --- pixel scorer ---


def features(pixels: np.ndarray) -> np.ndarray:
    """phi = (1, R, G, B, R^2, G^2, B^2) for every pixel, shape (n, 7)."""
    rgb = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    return np.hstack([np.ones((len(rgb), 1)), rgb, rgb**2])


def _training_pixels(
    crops: list[tuple[Image, PseudoMask]], max_pixels: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    rgb, target = [], []
    for image, mask in crops:
        if (mask.width, mask.height) != (image.width, image.height):
            raise SegmentationError(f"pseudo-mask does not match crop '{image.image_id}'")
        keep = mask.labels != PixelLabel.IGNORE
        rgb.append(image.pixels[keep])
        target.append(mask.labels[keep] == PixelLabel.FOREGROUND)
    rgb = np.concatenate(rgb) if rgb else np.empty((0, 3))
    target = np.concatenate(target) if target else np.empty(0, dtype=bool)
    if len(target) > max_pixels:
        chosen = np.sort(rng.choice(len(target), size=max_pixels, replace=False))
        rgb, target = rgb[chosen], target[chosen]
    return rgb, target.astype(np.float64)


def _balanced_loss(z: np.ndarray, y: np.ndarray, sw: np.ndarray) -> float:
    # -log(sigmoid(z)) == logaddexp(0, -z)
    per_pixel = y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    return float(sw @ per_pixel / sw.sum())


def train_scorer(
    crops: list[tuple[Image, PseudoMask]],
    epochs: int,
    lr: float,
    seed: int,
    max_pixels: int = 200_000,
) -> PixelScorer:
    """Logistic pixel scorer fitted by full-batch gradient descent.

    The loss is cross-entropy over Foreground/Background pixels with Foreground
    reweighted by the Background/Foreground ratio; Ignore pixels do not count.
    Features are standardised (class-balanced moments) while fitting and the
    weights are mapped back onto raw phi before they are returned.
    """
    if not crops:
        raise SegmentationError("training needs at least one labeled crop")
    if epochs < 0 or lr <= 0:
        raise SegmentationError(f"invalid training schedule epochs={epochs}, lr={lr}")

    rng = np.random.default_rng(seed)
    rgb, y = _training_pixels(crops, max_pixels, rng)
    n_fg = int(y.sum())
    n_bg = len(y) - n_fg
    if n_fg == 0:
        raise SegmentationError("no Foreground pixels in the training corpus")
    if n_bg == 0:
        raise SegmentationError("no Background pixels in the training corpus")
    sw = np.where(y > 0, n_bg / n_fg, 1.0)

    phi = features(rgb)
    mu = np.zeros(N_FEATURES)
    sd = np.ones(N_FEATURES)
    mu[1:] = np.average(phi[:, 1:], axis=0, weights=sw)
    sd[1:] = np.sqrt(np.average((phi[:, 1:] - mu[1:]) ** 2, axis=0, weights=sw))
    sd[sd < 1e-12] = 1.0
    x = (phi - mu) / sd

    w = np.zeros(N_FEATURES)
    history = []
    total = sw.sum()
    for epoch in range(epochs):
        z = x @ w
        loss = _balanced_loss(z, y, sw)
        if not np.isfinite(loss):
            raise SegmentationError(f"non-finite training loss at epoch {epoch}")
        history.append(loss)
        w -= lr * (x.T @ (sw * (expit(z) - y))) / total

    raw = w / sd
    raw[0] = w[0] - float(np.sum(w[1:] * mu[1:] / sd[1:]))
    if not np.all(np.isfinite(raw)):
        raise SegmentationError("training produced non-finite weights")
    if history:
        logger.info(
            "trained scorer on %d pixels (%d foreground): loss %.4f -> %.4f over %d epochs",
            len(y),
            n_fg,
            history[0],
            history[-1],
            epochs,
        )
    return PixelScorer(
        weights=[float(v) for v in raw],
        trained=epochs > 0,
        training_loss_history=history,
        epochs=epochs,
        learning_rate=lr,
        seed=seed,
    )


def score_map(image: Image, scorer: PixelScorer) -> np.ndarray:
    z = features(image.pixels) @ np.asarray(scorer.weights)
    return expit(z).reshape(image.height, image.width)


def foreground_map(image: Image, scorer: PixelScorer, tau: float) -> np.ndarray:
    return score_map(image, scorer) > tau


def training_accuracy(scorer: PixelScorer, crops: list[tuple[Image, PseudoMask]], tau: float = 0.5) -> float:
    correct = total = 0
    for image, mask in crops:
        keep = mask.labels != PixelLabel.IGNORE
        pred = foreground_map(image, scorer, tau)[keep]
        truth = mask.labels[keep] == PixelLabel.FOREGROUND
        correct += int(np.count_nonzero(pred == truth))
        total += int(keep.sum())
    return correct / total if total else 0.0


def save_scorer(scorer: PixelScorer, path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Path(path).write_text(scorer.model_dump_json(indent=2), encoding="utf-8")


def load_scorer(path: str | os.PathLike) -> PixelScorer:
    try:
        return PixelScorer.model_validate_json(Path(path).read_bytes())
    except (OSError, ValidationError) as e:
        raise SegmentationError(f"cannot load scorer {path}: {e}") from e


# --- instances ---


def _split(component: np.ndarray, params: SegParams) -> list[np.ndarray]:
    """Distance-transform watershed of one component; one boolean mask per part."""
    dist = ndimage.distance_transform_edt(np.pad(component, 1))[1:-1, 1:-1]
    peaks = peak_local_max(
        dist,
        min_distance=params.seed_separation,
        threshold_rel=PEAK_THRESHOLD_REL,
        exclude_border=False,
        labels=component.astype(np.int32),
    )
    if len(peaks) < 2:
        return [component]
    markers = np.zeros(component.shape, dtype=np.int32)
    for i, (r, c) in enumerate(peaks, start=1):
        markers[r, c] = i
    parts = watershed(-dist, markers, mask=component)
    return [parts == i for i in range(1, len(peaks) + 1)]


def segment(image: Image, scorer: PixelScorer, params: SegParams) -> SegmentationMask:
    """Threshold, label, split and filter berry instances.

    Components go to the watershed when they are not convex enough or carry
    more than one distance-transform seed. Parts below min_area or kappa are
    dropped. Instance ids follow the raster order of the centroids.
    """
    if not scorer.trained:
        raise SegmentationError("scorer is untrained")
    if not image.calibrated:
        raise SegmentationError(f"image '{image.image_id}' is not calibrated")

    labels, n = ndimage.label(foreground_map(image, scorer, params.tau))
    kept: list[tuple[float, float, np.ndarray, float]] = []
    dropped = 0
    for index, box in enumerate(ndimage.find_objects(labels), start=1):
        if box is None:
            continue
        component = labels[box] == index
        if component.sum() < params.min_area:
            dropped += 1
            continue
        for part in _split(component, params):
            ys, xs = np.nonzero(part)
            if len(xs) < params.min_area:
                dropped += 1
                continue
            xs = xs + box[1].start
            ys = ys + box[0].start
            pixels = np.stack([xs, ys], axis=1)
            cvx = convexity_of_pixels(pixels)
            if cvx < params.kappa:
                dropped += 1
                continue
            kept.append((float(ys.mean()), float(xs.mean()), pixels, cvx))

    if len(kept) > MAX_INSTANCE_ID:
        raise SegmentationError(f"too many instances in '{image.image_id}' ({len(kept)})")
    kept.sort(key=lambda k: (k[0], k[1]))
    ids = np.zeros((image.height, image.width), dtype=np.int32)
    convexities = {}
    for new_id, (_, _, pixels, cvx) in enumerate(kept, start=1):
        ids[pixels[:, 1], pixels[:, 0]] = new_id
        convexities[new_id] = cvx
    logger.debug(
        "%s: %d components, %d instances, %d parts dropped", image.image_id, n, len(kept), dropped
    )
    return SegmentationMask.from_labels(ids, image=image, convexities=convexities)


def convexity(instance: BerryInstance) -> float:
    return convexity_of_pixels(instance.pixels)


def count(mask: SegmentationMask) -> int:
    return len(mask.instances)


def evaluate(preds: list[SegmentationMask], truths: list[SegmentationMask]) -> EvalReport:
    """Binary-foreground IOU and absolute count error per image.

    Two empty foregrounds score an IOU of 1.
    """
    if len(preds) != len(truths):
        raise SegmentationError(f"{len(preds)} predictions for {len(truths)} truth masks")
    per_image = []
    for pred, truth in zip(preds, truths):
        if pred.ids.shape != truth.ids.shape:
            raise SegmentationError(
                f"mask shape {pred.ids.shape} does not match truth {truth.ids.shape} "
                f"for '{truth.image_id or pred.image_id}'"
            )
        inter = np.count_nonzero(pred.foreground & truth.foreground)
        union = np.count_nonzero(pred.foreground | truth.foreground)
        per_image.append(
            ImageEval(
                image_id=truth.image_id or pred.image_id,
                iou=inter / union if union else 1.0,
                count_error=abs(count(pred) - count(truth)),
            )
        )
    if not per_image:
        return EvalReport(miou=0.0, count_mae=0.0)
    return EvalReport(
        miou=float(np.mean([e.iou for e in per_image])),
        count_mae=float(np.mean([e.count_error for e in per_image])),
        per_image=per_image,
    )


# --- mask files ---


def save_mask(mask: SegmentationMask, path: str | os.PathLike) -> None:
    """16-bit single-channel PNG of instance ids plus a JSON instance table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if mask.ids.max(initial=0) > MAX_INSTANCE_ID:
        raise SegmentationError(f"instance ids of '{mask.image_id}' do not fit 16 bits")
    PILImage.fromarray(mask.ids.astype(np.uint16)).save(path)
    path.with_suffix(".json").write_text(mask.table().model_dump_json(indent=2), encoding="utf-8")


def load_mask(path: str | os.PathLike) -> SegmentationMask:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            ids = np.asarray(im).astype(np.int32)
        table = MaskTable.model_validate_json(path.with_suffix(".json").read_bytes())
    except (OSError, ValidationError) as e:
        raise SegmentationError(f"cannot load mask {path}: {e}") from e
    if ids.shape != (table.height, table.width):
        raise SegmentationError(f"mask {path} does not match its instance table")
    records = {r.id: r for r in table.instances}
    mask = SegmentationMask.from_labels(
        ids, image_id=table.image_id, convexities={r.id: r.convexity for r in table.instances}
    )
    if {inst.id for inst in mask.instances} != set(records):
        raise SegmentationError(f"instance table of {path} does not list the raster ids")
    instances = [replace(inst, mean_rgb=records[inst.id].mean_rgb) for inst in mask.instances]
    return replace(mask, instances=instances)


def load_masks(directory: str | os.PathLike) -> dict[str, SegmentationMask]:
    """Every mask under a directory, keyed by the image id in its table."""
    masks = {}
    for png in sorted(Path(directory).rglob("*.png")):
        if png.with_suffix(".json").exists():
            mask = load_mask(png)
            masks[mask.image_id] = mask
    return masks
