import datetime as dt
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy import ndimage
from scipy.special import expit

from app.calibration import CARD_FILE, PATCHES_FILE, distort
from app.config import DATA_DIR
from app.errors import SynthesisError
from app.imaging import ANNOTATIONS_FILE, BOG_FILE, FRAMES_DIR, write_png
from app.models import Image, SegmentationMask
from app.schemas import (
    N_CLASSES,
    BerrySpec,
    CaptureMeta,
    GreyReference,
    OracleReport,
    Palette,
    PatchRect,
    PointAnnotation,
    RipenessSeries,
    RiskConfig,
    SceneSpec,
    SeasonScript,
    Variety,
)
from app.segmentation import save_mask
from app.timeline import ripeness_from_red_fractions

logger = logging.getLogger(__name__)

TRUTH_DIR = "truth"
SEASON_FILE = "season.json"

SUPERSAMPLE = 4
GAP = 3.0
OCCLUSION_DISTANCE = (0.75, 0.95)
MIN_VISIBLE = 0.6
LEAF_NOISE_SIGMA = 8.0

DEFAULT_DATES = [
    dt.date(2022, 8, 2),
    dt.date(2022, 8, 16),
    dt.date(2022, 8, 25),
    dt.date(2022, 8, 31),
    dt.date(2022, 9, 9),
    dt.date(2022, 9, 14),
]
VARIETY_CYCLE = [Variety.HAINES, Variety.CRIMSON_QUEEN, Variety.MULLICA_QUEEN, Variety.STEVENS]
# Day of year at which half the crop has turned past the middle class
RIPENING_ONSET = {
    Variety.HAINES: 226,
    Variety.CRIMSON_QUEEN: 233,
    Variety.MULLICA_QUEEN: 240,
    Variety.STEVENS: 252,
}
RIPENING_SLOPE_DAYS = 8.0
MIXTURE_SPREAD = 0.9

CARD_PATCH = 40
CARD_GAP = 8


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    image: Image
    truth_mask: SegmentationMask
    points: PointAnnotation
    berry_specs: list[BerrySpec]
    seed: int


def load_palette(path: str | os.PathLike) -> Palette:
    try:
        return Palette.model_validate_json(Path(path).read_bytes())
    except (OSError, ValidationError) as e:
        raise SynthesisError(f"cannot load palette {path}: {e}") from e


def default_palette() -> Palette:
    return load_palette(os.path.join(DATA_DIR, "palette.json"))


def apportion(total: int, weights) -> list[int]:
    """Largest-remainder split of an integer total; ties go to the lower index."""
    w = np.asarray(weights, dtype=np.float64)
    if total == 0:
        return [0] * len(w)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(int)
    remainder = quota - counts
    for i in sorted(range(len(w)), key=lambda i: (-remainder[i], i))[: total - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def class_counts(n: int, mixture, red_classes: tuple[int, ...] = (4, 5)) -> list[int]:
    """Berries per class; the red total is fixed first so red fractions track the mixture."""
    red_idx = [c - 1 for c in red_classes]
    other_idx = [i for i in range(N_CLASSES) if i not in red_idx]
    red_mass = sum(mixture[i] for i in red_idx)
    n_red = min(n, int(round(n * red_mass)))
    counts = [0] * N_CLASSES
    for i, c in zip(red_idx, apportion(n_red, [mixture[i] for i in red_idx])):
        counts[i] = c
    for i, c in zip(other_idx, apportion(n - n_red, [mixture[i] for i in other_idx])):
        counts[i] = c
    return counts


def _coverage(spec: BerrySpec, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Fraction of 4x4 subsamples of each window pixel that fall inside the ellipse."""
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (x0 + np.arange(w))[:, None] + offsets[None, :]
    ys = (y0 + np.arange(h))[:, None] + offsets[None, :]
    dx = xs.reshape(1, -1) - spec.center[0]
    dy = ys.reshape(-1, 1) - spec.center[1]
    cos, sin = math.cos(spec.angle), math.sin(spec.angle)
    u = (dx * cos + dy * sin) / spec.semi_axes[0]
    v = (-dx * sin + dy * cos) / spec.semi_axes[1]
    inside = (u**2 + v**2) <= 1.0
    return inside.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(1, 3))


def _window(spec: BerrySpec, width: int, height: int) -> tuple[int, int, int, int]:
    reach = max(spec.semi_axes) + 1
    x0 = max(0, int(math.floor(spec.center[0] - reach)))
    y0 = max(0, int(math.floor(spec.center[1] - reach)))
    x1 = min(width, int(math.ceil(spec.center[0] + reach)) + 1)
    y1 = min(height, int(math.ceil(spec.center[1] + reach)) + 1)
    return x0, y0, x1 - x0, y1 - y0


def _leaf_background(spec: SceneSpec, palette: Palette, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(size=(spec.height, spec.width, 3))
    for c in range(3):
        smooth = ndimage.gaussian_filter(noise[:, :, c], LEAF_NOISE_SIGMA, mode="wrap")
        noise[:, :, c] = smooth / (smooth.std() or 1.0)
    return np.clip(np.asarray(palette.leaf) + noise * np.asarray(palette.leaf_noise), 0.0, 1.0)


def _random_shape(spec: SceneSpec, rng: np.random.Generator) -> tuple[float, tuple[float, float], float]:
    radius = float(rng.uniform(*spec.radius_range))
    aspect = float(rng.uniform(1.0, spec.max_aspect))
    semi_axes = (radius * math.sqrt(aspect), radius / math.sqrt(aspect))
    return radius, semi_axes, float(rng.uniform(0.0, math.pi))


def _visible_ok(behind: BerrySpec, front: BerrySpec, width: int, height: int) -> bool:
    """The occluded berry keeps enough area, stays connected and keeps its centre pixel."""
    x0, y0, w, h = _window(behind, width, height)
    own = _coverage(behind, x0, y0, w, h) >= 0.5
    visible = own & ~(_coverage(front, x0, y0, w, h) >= 0.5)
    if own.sum() == 0 or visible.sum() < MIN_VISIBLE * own.sum():
        return False
    _, parts = ndimage.label(visible)
    cx, cy = int(behind.center[0]) - x0, int(behind.center[1]) - y0
    return parts == 1 and bool(visible[cy, cx])


def _place(spec: SceneSpec, classes: list[int], palette: Palette, rng: np.random.Generator) -> list[BerrySpec]:
    n = len(classes)
    # every occluded berry needs its own unoccluded host
    n_occluded = min(int(spec.occlusion_rate * n), n // 2)
    n_free = n - n_occluded
    berries: list[BerrySpec] = []
    centers = np.empty((0, 2))
    reach = np.empty(0)
    attempts = 0

    def budget():
        nonlocal attempts
        attempts += 1
        if attempts > spec.max_attempts:
            raise SynthesisError(
                f"could not place {n} berries in {spec.width}x{spec.height} "
                f"within {spec.max_attempts} attempts (placed {len(berries)})"
            )

    def clear_of(center, a, skip=None) -> bool:
        if not len(centers):
            return True
        d = np.hypot(*(centers - center).T)
        ok = d >= reach + a + GAP
        if skip is not None:
            ok[skip] = True
        return bool(ok.all())

    for cls in classes[:n_free]:
        radius, semi_axes, angle = _random_shape(spec, rng)
        a = semi_axes[0]
        while True:
            budget()
            center = rng.uniform([a + 1, a + 1], [spec.width - a - 1, spec.height - a - 1])
            if clear_of(center, a):
                break
        berries.append(
            BerrySpec(
                center=(float(center[0]), float(center[1])),
                radius=radius,
                semi_axes=semi_axes,
                angle=angle,
                albedo_class=cls,
                base_rgb=palette.classes[cls - 1],
            )
        )
        centers = np.vstack([centers, center])
        reach = np.append(reach, a)

    hosts_used: set[int] = set()
    for cls in classes[n_free:]:
        radius, semi_axes, angle = _random_shape(spec, rng)
        a = semi_axes[0]
        while True:
            budget()
            host = int(rng.integers(n_free))
            if host in hosts_used:
                continue
            front = berries[host]
            d = rng.uniform(*OCCLUSION_DISTANCE) * (radius + front.radius)
            theta = rng.uniform(0.0, 2 * math.pi)
            center = np.asarray(front.center) + d * np.array([math.cos(theta), math.sin(theta)])
            if not (a + 1 <= center[0] <= spec.width - a - 1 and a + 1 <= center[1] <= spec.height - a - 1):
                continue
            if not clear_of(center, a, skip=host):
                continue
            candidate = BerrySpec(
                center=(float(center[0]), float(center[1])),
                radius=radius,
                semi_axes=semi_axes,
                angle=angle,
                albedo_class=cls,
                base_rgb=palette.classes[cls - 1],
            )
            if _visible_ok(candidate, front, spec.width, spec.height):
                break
        hosts_used.add(host)
        berries[host] = berries[host].model_copy(update={"occludes": len(berries)})
        berries.append(candidate)
        centers = np.vstack([centers, center])
        reach = np.append(reach, a)
    return berries


def generate_scene(spec: SceneSpec, palette: Palette | None = None, image_id: str = "") -> SyntheticScene:
    """Leaf-textured crop with anti-aliased berries, truth instances and centre points.

    Occluded berries are painted first so their occluders cover them; a truth
    pixel belongs to the topmost berry covering at least half of it.
    """
    palette = palette or default_palette()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_berries if spec.n_berries is not None else int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))

    counts = class_counts(n, spec.class_mixture)
    classes = rng.permutation(np.repeat(np.arange(1, N_CLASSES + 1), counts)).tolist()
    pixels = _leaf_background(spec, palette, rng)
    berries = _place(spec, [int(c) for c in classes], palette, rng)

    ids = np.zeros((spec.height, spec.width), dtype=np.int32)
    behind = {b.occludes for b in berries if b.occludes is not None}
    order = sorted(range(len(berries)), key=lambda i: (i not in behind, i))
    for i in order:
        berry = berries[i]
        x0, y0, w, h = _window(berry, spec.width, spec.height)
        alpha = _coverage(berry, x0, y0, w, h)[:, :, None]
        jitter = rng.uniform(-spec.jitter, spec.jitter, size=(h, w, 3))
        color = np.clip(np.asarray(berry.base_rgb) + jitter, 0.0, 1.0)
        region = pixels[y0 : y0 + h, x0 : x0 + w]
        pixels[y0 : y0 + h, x0 : x0 + w] = (1.0 - alpha) * region + alpha * color
        ids[y0 : y0 + h, x0 : x0 + w][alpha[:, :, 0] >= 0.5] = i + 1

    image = Image(np.clip(pixels, 0.0, 1.0), calibrated=True, image_id=image_id)
    truth = SegmentationMask.from_labels(ids, image=image, image_id=image_id)
    if len(truth.instances) != len(berries):
        raise SynthesisError(f"{len(berries)} berries produced {len(truth.instances)} truth instances")
    points = PointAnnotation(image_id=image_id, points=[b.center for b in berries])
    return SyntheticScene(image=image, truth_mask=truth, points=points, berry_specs=berries, seed=spec.seed)


def ripening_mixture(day_of_year: int, onset: float) -> tuple[float, ...]:
    """Gaussian bump over the classes whose centre moves from class 1 to class 5 as the season advances."""
    centre = (N_CLASSES - 1) * float(expit((day_of_year - onset) / RIPENING_SLOPE_DAYS))
    weights = np.exp(-((np.arange(N_CLASSES) - centre) ** 2) / (2 * MIXTURE_SPREAD**2))
    weights /= weights.sum()
    mixture = [float(w) for w in weights]
    mixture[-1] = 1.0 - sum(mixture[:-1])
    return tuple(mixture)


def ripening_script(bog_id: str, variety: Variety | None, dates: list[dt.date] | None = None) -> SeasonScript:
    dates = dates or DEFAULT_DATES
    onset = RIPENING_ONSET.get(variety, RIPENING_ONSET[Variety.MULLICA_QUEEN])
    return SeasonScript(
        bog_id=bog_id,
        variety=variety,
        dates=dates,
        mixtures=[ripening_mixture(d.timetuple().tm_yday, onset) for d in dates],
    )


def season_dates(n: int) -> list[dt.date]:
    """The first n visit dates; beyond the default six, weekly visits continue."""
    if n < 1:
        raise SynthesisError(f"a season needs at least one date, got {n}")
    dates = list(DEFAULT_DATES[:n])
    while len(dates) < n:
        dates.append(dates[-1] + dt.timedelta(days=7))
    return dates


def scene_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def generate_season(
    script: SeasonScript, scene_spec: SceneSpec, seed: int, palette: Palette | None = None
) -> list[tuple[SyntheticScene, CaptureMeta]]:
    palette = palette or default_palette()
    season = []
    for i, (date, mixture) in enumerate(zip(script.dates, script.mixtures)):
        spec = scene_spec.model_copy(update={"class_mixture": mixture, "seed": scene_seed(seed, i)})
        image_id = f"{script.bog_id}/{date.isoformat()}/frame_000"
        meta = CaptureMeta(bog_id=script.bog_id, variety=script.variety, date=date, source_frame="frame_000.png")
        season.append((generate_scene(spec, palette, image_id=image_id), meta))
    logger.info("generated %d scenes for bog %s", len(season), script.bog_id)
    return season


def analytic_ratios(script: SeasonScript, cfg: RiskConfig) -> list[float]:
    red = [sum(m[c - 1] for c in cfg.red_classes) for m in script.mixtures]
    return [float(r) for r in ripeness_from_red_fractions(red)]


def oracle_evaluate(
    pipeline_output: RipenessSeries, script: SeasonScript, cfg: RiskConfig | None = None
) -> OracleReport:
    """Per-date gap between measured ripeness ratios and those implied by the script."""
    cfg = cfg or RiskConfig(threshold=pipeline_output.threshold)
    if pipeline_output.dates != script.dates:
        raise SynthesisError(
            f"pipeline dates {[d.isoformat() for d in pipeline_output.dates]} do not match "
            f"script dates {[d.isoformat() for d in script.dates]}"
        )
    expected = analytic_ratios(script, cfg)
    errors = [abs(p - a) for p, a in zip(pipeline_output.ratios, expected)]

    analytic_index = next((i for i, r in enumerate(expected) if r >= cfg.threshold), None)
    pipeline_index = next((i for i, r in enumerate(pipeline_output.ratios) if r >= cfg.threshold), None)
    index_error = None
    if analytic_index is not None and pipeline_index is not None:
        index_error = abs(analytic_index - pipeline_index)
    return OracleReport(
        bog_id=script.bog_id,
        dates=script.dates,
        analytic_ratios=expected,
        pipeline_ratios=list(pipeline_output.ratios),
        per_date_errors=errors,
        max_ratio_error=max(errors),
        analytic_first_risk=script.dates[analytic_index] if analytic_index is not None else None,
        pipeline_first_risk=script.dates[pipeline_index] if pipeline_index is not None else None,
        first_risk_index_error=index_error,
    )


# --- dataset layout ---


def card_layout() -> list[PatchRect]:
    step = CARD_PATCH + CARD_GAP
    return [PatchRect(x=CARD_GAP + i * step, y=CARD_GAP, w=CARD_PATCH, h=CARD_PATCH) for i in range(6)]


def render_card(reference: GreyReference) -> Image:
    """Grey patches on a black card, lightest first, replicated across R, G and B."""
    rects = card_layout()
    width = rects[-1].x + CARD_PATCH + CARD_GAP
    pixels = np.zeros((CARD_PATCH + 2 * CARD_GAP, width, 3))
    for rect, value in zip(rects, reference.values):
        pixels[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w] = value
    return Image(pixels, calibrated=True, image_id="card")


def session_distortion(seed: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    rng = np.random.default_rng(seed)
    gain = tuple(float(g) for g in rng.uniform(0.85, 1.05, size=3))
    offset = tuple(float(o) for o in rng.uniform(-0.02, 0.02, size=3))
    return gain, offset


def write_scene(
    scene: SyntheticScene,
    meta: CaptureMeta,
    root: str | os.PathLike,
    stem: str = "frame_000",
    distortion: tuple | None = None,
) -> Path:
    """Write a frame, its point annotation and its truth mask into the dataset layout."""
    session = Path(root) / meta.bog_id / meta.date.isoformat()
    image_id = f"{meta.bog_id}/{meta.date.isoformat()}/{stem}"
    frame = scene.image if distortion is None else distort(scene.image, *distortion)
    write_png(frame, session / FRAMES_DIR / f"{stem}.png")

    annotations_path = session / ANNOTATIONS_FILE
    annotations = json.loads(annotations_path.read_text(encoding="utf-8")) if annotations_path.exists() else []
    annotations = [a for a in annotations if a["image_id"] != image_id]
    annotations.append({"image_id": image_id, "points": [list(p) for p in scene.points.points]})
    annotations_path.write_text(json.dumps(annotations, indent=2), encoding="utf-8")

    truth = SegmentationMask(scene.truth_mask.ids, scene.truth_mask.instances, image_id)
    save_mask(truth, session / TRUTH_DIR / f"{stem}.png")
    return session


def write_season(
    season: list[tuple[SyntheticScene, CaptureMeta]],
    script: SeasonScript,
    root: str | os.PathLike,
    reference: GreyReference,
    seed: int,
    distort_sessions: bool = True,
) -> None:
    """Write one bog's season; every session gets its own camera response and a matching card."""
    bog_dir = Path(root) / script.bog_id
    bog_dir.mkdir(parents=True, exist_ok=True)
    variety = script.variety.value if script.variety else None
    (bog_dir / BOG_FILE).write_text(json.dumps({"variety": variety}), encoding="utf-8")
    (bog_dir / SEASON_FILE).write_text(script.model_dump_json(indent=2), encoding="utf-8")

    card = render_card(reference)
    rects = [r.model_dump() for r in card_layout()]
    for i, (scene, meta) in enumerate(season):
        distortion = session_distortion(scene_seed(seed, i, 1)) if distort_sessions else None
        session = write_scene(scene, meta, root, distortion=distortion)
        if distortion is not None:
            write_png(distort(card, *distortion), session / CARD_FILE)
            (session / PATCHES_FILE).write_text(json.dumps(rects), encoding="utf-8")


def load_season_script(bog_dir: str | os.PathLike) -> SeasonScript | None:
    path = Path(bog_dir) / SEASON_FILE
    if not path.exists():
        return None
    try:
        return SeasonScript.model_validate_json(path.read_bytes())
    except ValidationError as e:
        raise SynthesisError(f"malformed season script {path}: {e}") from e


def synthesize_dataset(
    root: str | os.PathLike,
    n_bogs: int,
    n_dates: int,
    scene_spec: SceneSpec,
    seed: int,
    reference: GreyReference,
    palette: Palette | None = None,
    mixture: tuple[float, ...] | None = None,
    distort_sessions: bool = True,
) -> list[SeasonScript]:
    """Write a multi-bog synthetic season; bog ids B01, B02, ... cycle through the varieties."""
    if n_bogs < 1:
        raise SynthesisError(f"at least one bog is required, got {n_bogs}")
    palette = palette or default_palette()
    dates = season_dates(n_dates)
    scripts = []
    for b in range(n_bogs):
        bog_id = f"B{b + 1:02d}"
        variety = VARIETY_CYCLE[b % len(VARIETY_CYCLE)]
        if mixture is None:
            script = ripening_script(bog_id, variety, dates)
        else:
            script = SeasonScript(bog_id=bog_id, variety=variety, dates=dates, mixtures=[mixture] * len(dates))
        season = generate_season(script, scene_spec, scene_seed(seed, b), palette)
        write_season(season, script, root, reference, scene_seed(seed, b, 2), distort_sessions)
        scripts.append(script)
    logger.info("wrote %d bogs x %d dates under %s", n_bogs, n_dates, root)
    return scripts
