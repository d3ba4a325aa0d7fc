import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

from app import __version__, reports
from app.albedo import (
    build_color_model,
    class_histogram,
    classify_berry,
    load_color_model,
    sample_berry_pixels,
    save_color_model,
    write_histograms_csv,
)
from app.calibration import apply_correction, load_grey_reference, session_correction
from app.config import Settings
from app.errors import CranberryError, StageError
from app.imaging import dataset_summary, load_dataset, load_frame, points_in_crop, tile_frame
from app.models import CropGrid, Image, SegmentationMask
from app.schemas import (
    BerryClassification,
    CaptureMeta,
    ClassHistogram,
    ColorClassModel,
    DatasetEntry,
    DatasetIndex,
    EvalReport,
    OracleReport,
    PixelScorer,
    RadiometricCorrection,
    RipenessSeries,
    RiskConfig,
    RiskRecord,
    RunManifest,
    SceneSpec,
    SeasonScript,
    SegParams,
    VarietyRisk,
)
from app.segmentation import (
    build_pseudo_mask,
    evaluate,
    load_masks,
    load_scorer,
    save_mask,
    save_scorer,
    segment,
    train_scorer,
)
from app.synth import TRUTH_DIR, generate_season, load_season_script, oracle_evaluate
from app.timeline import risk_report, ripeness_series, variety_comparison, write_ripeness_csv

logger = logging.getLogger(__name__)

MANIFEST_PACKAGES = ["numpy", "scipy", "scikit-image", "scikit-learn", "pillow", "pydantic", "jinja2"]


@dataclass
class CropResult:
    entry: DatasetEntry
    crop: Image
    mask: SegmentationMask


@dataclass
class RunResult:
    output_dir: Path
    histograms: list[ClassHistogram] = field(default_factory=list)
    series: list[RipenessSeries] = field(default_factory=list)
    varieties: list[VarietyRisk] = field(default_factory=list)
    risk: list[RiskRecord] = field(default_factory=list)
    oracle: list[OracleReport] = field(default_factory=list)
    evaluation: EvalReport | None = None
    manifest: RunManifest | None = None


@contextmanager
def stage(name: str):
    """Time a pipeline stage and turn any failure into a StageError naming it."""
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (CranberryError, OSError, ValueError) as e:
        raise StageError(name, getattr(e, "detail", str(e))) from e
    logger.info("stage %s finished in %.2fs", name, time.perf_counter() - started)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def grid_for(settings: Settings) -> CropGrid:
    return CropGrid(crop_w=settings.CROP_WIDTH, crop_h=settings.CROP_HEIGHT)


# --- stages ---


def session_corrections(
    index: DatasetIndex, settings: Settings
) -> dict[str, RadiometricCorrection | None]:
    reference = load_grey_reference(settings.GREY_REFERENCE_PATH)
    corrections = {}
    for session_id in sorted(index.sessions()):
        corr = session_correction(Path(index.root) / session_id, session_id, reference)
        if corr is None:
            logger.warning("session %s has no calibration, frames are taken as calibrated", session_id)
        corrections[session_id] = corr
    return corrections


def calibrated_crops(
    entry: DatasetEntry, corr: RadiometricCorrection | None, grid: CropGrid
) -> list[Image]:
    frame = load_frame(entry)
    if corr is None:
        frame = frame.with_pixels(frame.pixels, calibrated=True)
    else:
        frame = apply_correction(frame, corr)
    return tile_frame(frame, grid)


def train_from_points(
    index: DatasetIndex,
    corrections: dict[str, RadiometricCorrection | None],
    settings: Settings,
) -> PixelScorer:
    """Fit the pixel scorer on pseudo-masks built from the labeled frames' points."""
    params = settings.seg_params()
    grid = grid_for(settings)
    corpus = []
    for entry in index.entries:
        if not entry.labeled:
            continue
        for crop in calibrated_crops(entry, corrections.get(entry.session_id), grid):
            points = points_in_crop(entry.annotation, crop)
            corpus.append((crop, build_pseudo_mask(points, (crop.width, crop.height), params.r_fg, params.r_ig)))
    logger.info("training corpus: %d labeled crops", len(corpus))
    return train_scorer(
        corpus,
        epochs=settings.EPOCHS,
        lr=settings.LEARNING_RATE,
        seed=settings.SEED,
        max_pixels=settings.MAX_TRAIN_PIXELS,
    )


def segment_dataset(
    index: DatasetIndex,
    corrections: dict[str, RadiometricCorrection | None],
    scorer: PixelScorer,
    settings: Settings,
) -> list[CropResult]:
    params = settings.seg_params()
    grid = grid_for(settings)

    def run(entry: DatasetEntry) -> list[CropResult]:
        return [
            CropResult(entry, crop, segment(crop, scorer, params))
            for crop in calibrated_crops(entry, corrections.get(entry.session_id), grid)
        ]

    results = [r for batch in _map(run, index.entries, settings.JOBS) for r in batch]
    logger.info(
        "segmented %d crops, %d berries", len(results), sum(len(r.mask.instances) for r in results)
    )
    return results


def fit_color_model(results: list[CropResult], settings: Settings) -> ColorClassModel:
    pixels = sample_berry_pixels(
        [r.mask for r in results], [r.crop for r in results], settings.SAMPLE_PIXELS, settings.SEED
    )
    return build_color_model(pixels, settings.K_CLUSTERS, settings.SEED, settings.COLOR_SPACE)


def classify_results(
    results: list[CropResult], model: ColorClassModel, jobs: int = 1
) -> list[ClassHistogram]:
    """One histogram per session (bog and date), sessions in id order."""

    def run(result: CropResult) -> list[BerryClassification]:
        meta = result.entry.meta
        return [
            classify_berry(inst, result.crop, model).model_copy(update={"bog_id": meta.bog_id, "date": meta.date})
            for inst in result.mask.instances
        ]

    by_session: dict[str, tuple[CaptureMeta, list[BerryClassification]]] = {}
    for result, labels in zip(results, _map(run, results, jobs)):
        meta = result.entry.meta
        by_session.setdefault(result.entry.session_id, (meta, []))[1].extend(labels)
    return [class_histogram(labels, meta) for _, (meta, labels) in sorted(by_session.items())]


def build_series(hists: list[ClassHistogram], cfg: RiskConfig) -> list[RipenessSeries]:
    grouped: dict[str, list[ClassHistogram]] = {}
    for h in hists:
        grouped.setdefault(h.bog_id, []).append(h)
    series = []
    for bog in sorted(grouped):
        bog_hists = sorted(grouped[bog], key=lambda h: h.date)
        if len(bog_hists) < 2:
            logger.warning("bog %s has a single visit, no ripeness series", bog)
            continue
        series.append(ripeness_series(bog_hists, cfg))
    return series


def season_oracle(series: RipenessSeries | None, script: SeasonScript, cfg: RiskConfig) -> OracleReport:
    """Oracle comparison that reports a failure instead of raising it."""
    if series is None:
        return OracleReport(bog_id=script.bog_id, dates=script.dates, error="no ripeness series for this bog")
    try:
        return oracle_evaluate(series, script, cfg)
    except CranberryError as e:
        return OracleReport(bog_id=script.bog_id, dates=script.dates, error=e.detail)


def run_synthetic_season(
    script: SeasonScript,
    scene_spec: SceneSpec,
    seed: int,
    scorer: PixelScorer | None,
    model: ColorClassModel,
    params: SegParams,
    cfg: RiskConfig,
    use_truth: bool = False,
) -> OracleReport:
    """Segment, classify and score a generated season in memory against its script.

    With ``use_truth`` the truth masks stand in for segmentation.
    """
    try:
        season = generate_season(script, scene_spec, seed)
        hists = []
        for scene, meta in season:
            mask = scene.truth_mask if use_truth else segment(scene.image, scorer or PixelScorer(), params)
            labels = [classify_berry(inst, scene.image, model) for inst in mask.instances]
            hists.append(class_histogram(labels, meta))
        series = ripeness_series(hists, cfg)
    except CranberryError as e:
        logger.warning("synthetic season %s failed: %s", script.bog_id, e.detail)
        return OracleReport(bog_id=script.bog_id, dates=script.dates, error=e.detail)
    return season_oracle(series, script, cfg)


# --- provenance ---


def _sha256_json(value) -> str:
    return hashlib.sha256(json.dumps(value, sort_keys=True, default=str).encode()).hexdigest()


def config_hash(settings: Settings) -> str:
    return _sha256_json(settings.fingerprint_fields())


def inputs_hash(paths: list[str | os.PathLike]) -> str:
    """Digest of every file under the given paths (relative name and content)."""
    digest = hashlib.sha256()
    for base in paths:
        base = Path(base)
        if not base.exists():
            continue
        files = sorted(p for p in base.rglob("*") if p.is_file()) if base.is_dir() else [base]
        for f in files:
            rel = f.relative_to(base).as_posix() if base.is_dir() else f.name
            digest.update(rel.encode())
            digest.update(b"\0")
            digest.update(f.read_bytes())
    return digest.hexdigest()


def package_versions() -> dict[str, str]:
    versions = {}
    for name in MANIFEST_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def build_manifest(settings: Settings, outputs: list[str], train: bool) -> RunManifest:
    inputs = [settings.DATA_ROOT, settings.GREY_REFERENCE_PATH]
    if not train:
        inputs += [settings.SCORER_PATH, settings.COLOR_MODEL_PATH]
    cfg_hash = config_hash(settings)
    in_hash = inputs_hash(inputs)
    return RunManifest(
        version=__version__,
        config_hash=cfg_hash,
        inputs_hash=in_hash,
        manifest_hash=hashlib.sha256(f"{cfg_hash}:{in_hash}:{int(train)}".encode()).hexdigest(),
        packages=package_versions(),
        settings=json.loads(json.dumps(settings.fingerprint_fields(), default=str)),
        outputs=sorted(outputs),
    )


# --- run ---


def mask_path(root: Path, image_id: str) -> Path:
    return root / reports.MASKS_DIR / f"{image_id}.png"


def write_bundle(
    out: Path,
    result: RunResult,
    crops: list[CropResult],
    summary,
    threshold: float,
) -> list[str]:
    for c in crops:
        save_mask(c.mask, mask_path(out, c.crop.image_id))
    reports.write_counts_csv(
        [
            (c.crop.image_id, c.entry.meta.bog_id, c.entry.meta.date.isoformat(), len(c.mask.instances))
            for c in crops
        ],
        out / reports.COUNTS_CSV,
    )
    write_histograms_csv(result.histograms, out / reports.HISTOGRAMS_CSV)
    write_ripeness_csv(result.series, out / reports.RIPENESS_CSV)
    reports.write_json(out / reports.RISK_JSON, result.risk, list[RiskRecord])
    reports.write_json(out / reports.VARIETIES_JSON, result.varieties, list[VarietyRisk])
    reports.write_json(out / reports.SUMMARY_JSON, summary)
    if result.evaluation is not None:
        reports.write_json(out / reports.EVAL_JSON, result.evaluation)
    if result.oracle:
        reports.write_json(out / reports.ORACLE_JSON, result.oracle, list[OracleReport])
    for bog in sorted({h.bog_id for h in result.histograms}):
        reports.write_text(
            out / reports.histograms_svg_name(bog),
            reports.render_histograms_svg(bog, [h for h in result.histograms if h.bog_id == bog]),
        )
    reports.write_text(out / reports.RIPENESS_SVG, reports.render_ripeness_svg(result.series, threshold))
    return sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file())


def _publish(staging: Path, output_dir: Path) -> None:
    """Replace the bundle in output_dir with the staged one."""
    output_dir.mkdir(parents=True, exist_ok=True)
    reports.clear_bundle(output_dir)
    for item in sorted(staging.iterdir()):
        target = output_dir / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        shutil.move(str(item), str(target))


def run_pipeline(settings: Settings, train: bool = False) -> RunResult:
    """calibrate -> tile -> segment -> classify -> histogram -> series -> reports.

    Reports are staged next to OUTPUT_DIR and only moved in once every stage
    succeeded, so a failed run leaves nothing behind.
    """
    settings.validate_paths(need_models=not train)
    cfg = settings.risk_config()
    output_dir = Path(settings.OUTPUT_DIR)
    output_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".partial-", dir=output_dir.parent))
    result = RunResult(output_dir=output_dir)
    try:
        with stage("ingest"):
            index = load_dataset(settings.DATA_ROOT)
            summary = dataset_summary(index)
        with stage("calibrate"):
            corrections = session_corrections(index, settings)

        if index.entries:
            with stage("train-scorer" if train else "load-models"):
                if train:
                    scorer = train_from_points(index, corrections, settings)
                    save_scorer(scorer, settings.SCORER_PATH)
                else:
                    scorer = load_scorer(settings.SCORER_PATH)
                    model = load_color_model(settings.COLOR_MODEL_PATH)
            with stage("segment"):
                crops = segment_dataset(index, corrections, scorer, settings)
            if train:
                with stage("color-model"):
                    model = fit_color_model(crops, settings)
                    save_color_model(model, settings.COLOR_MODEL_PATH)
            with stage("classify"):
                result.histograms = classify_results(crops, model, settings.JOBS)
        else:
            logger.warning("empty dataset under %s, writing empty reports", settings.DATA_ROOT)
            crops = []

        with stage("series"):
            result.series = build_series(result.histograms, cfg)
            result.varieties = variety_comparison(result.series)
            result.risk = risk_report(result.series)

        with stage("evaluate"):
            truths = truth_dir_masks(settings.DATA_ROOT) if index.entries else {}
            paired = [(c.mask, truths[c.crop.image_id]) for c in crops if c.crop.image_id in truths]
            if paired:
                result.evaluation = evaluate([p for p, _ in paired], [t for _, t in paired])
            by_bog = {s.bog_id: s for s in result.series}
            for bog in sorted({e.meta.bog_id for e in index.entries}):
                script = load_season_script(Path(settings.DATA_ROOT) / bog)
                if script is not None:
                    result.oracle.append(season_oracle(by_bog.get(bog), script, cfg))

        with stage("reports"):
            outputs = write_bundle(staging, result, crops, summary, cfg.threshold)
            result.manifest = build_manifest(settings, outputs + [reports.MANIFEST_JSON], train)
            reports.write_json(staging / reports.MANIFEST_JSON, result.manifest)
            _publish(staging, output_dir)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return result


def truth_dir_masks(data_root: str | os.PathLike) -> dict[str, SegmentationMask]:
    """Truth masks written by the synthetic generator, keyed by image id."""
    masks = {}
    for truth_dir in sorted(Path(data_root).glob(f"*/*/{TRUTH_DIR}")):
        masks.update(load_masks(truth_dir))
    return masks


def crops_with_masks(
    index: DatasetIndex,
    corrections: dict[str, RadiometricCorrection | None],
    masks: dict[str, SegmentationMask],
    settings: Settings,
) -> list[CropResult]:
    """Pair saved masks with freshly calibrated crops; crops without a mask are skipped."""
    grid = grid_for(settings)
    results = []
    for entry in index.entries:
        for crop in calibrated_crops(entry, corrections.get(entry.session_id), grid):
            mask = masks.get(crop.image_id)
            if mask is None:
                logger.warning("no mask for crop %s", crop.image_id)
                continue
            results.append(CropResult(entry, crop, mask))
    return results
