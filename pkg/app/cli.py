import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from app import __version__, reports
from app.albedo import load_color_model, read_histograms_csv, save_color_model, write_histograms_csv
from app.calibration import (
    fit_correction,
    load_grey_reference,
    load_patch_rects,
    measure_grey_patches,
    save_correction,
)
from app.config import Settings, load_settings
from app.errors import EXIT_OK, EXIT_USAGE, CranberryError, DatasetError, UsageError
from app.imaging import load_dataset, read_bog_variety, read_png
from app.pipeline import (
    build_series,
    classify_results,
    crops_with_masks,
    fit_color_model,
    mask_path,
    run_pipeline,
    segment_dataset,
    session_corrections,
    train_from_points,
)
from app.schemas import RiskRecord, RunManifest, SceneSpec, VarietyRisk
from app.segmentation import evaluate, load_masks, load_scorer, save_mask, save_scorer
from app.synth import load_palette, synthesize_dataset
from app.timeline import risk_report, variety_comparison, write_ripeness_csv

logger = logging.getLogger("app")

# flag dest -> Settings field
SETTING_FLAGS = {
    "data": "DATA_ROOT",
    "output": "OUTPUT_DIR",
    "scorer": "SCORER_PATH",
    "color_model": "COLOR_MODEL_PATH",
    "reference": "GREY_REFERENCE_PATH",
    "palette": "PALETTE_PATH",
    "crop_width": "CROP_WIDTH",
    "crop_height": "CROP_HEIGHT",
    "tau": "TAU",
    "kappa": "KAPPA",
    "min_area": "MIN_AREA",
    "rfg": "R_FG",
    "rig": "R_IG",
    "seed_separation": "SEED_SEPARATION",
    "epochs": "EPOCHS",
    "lr": "LEARNING_RATE",
    "max_train_pixels": "MAX_TRAIN_PIXELS",
    "k": "K_CLUSTERS",
    "sample_pixels": "SAMPLE_PIXELS",
    "color_space": "COLOR_SPACE",
    "threshold": "RISK_THRESHOLD",
    "seed": "SEED",
    "jobs": "JOBS",
    "log_level": "LOG_LEVEL",
}


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    g = common.add_argument_group("configuration (flag > config file > environment > default)")
    g.add_argument("--config", help="TOML or JSON file with settings")
    g.add_argument("--data", help="dataset root")
    g.add_argument("--output", help="report directory")
    g.add_argument("--scorer", help="pixel scorer JSON")
    g.add_argument("--color-model", dest="color_model", help="color class model JSON")
    g.add_argument("--reference", help="grey reference JSON")
    g.add_argument("--palette", help="synthetic palette JSON")
    g.add_argument("--crop-width", dest="crop_width", type=int)
    g.add_argument("--crop-height", dest="crop_height", type=int)
    g.add_argument("--tau", type=float, help="score threshold")
    g.add_argument("--kappa", type=float, help="minimum convexity")
    g.add_argument("--min-area", dest="min_area", type=int, help="minimum instance area (px)")
    g.add_argument("--rfg", type=int, help="pseudo-mask foreground radius (px)")
    g.add_argument("--rig", type=int, help="pseudo-mask ignore ring width (px)")
    g.add_argument("--seed-separation", dest="seed_separation", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, help="scorer learning rate")
    g.add_argument("--max-train-pixels", dest="max_train_pixels", type=int)
    g.add_argument("--k", type=int, help="raw color clusters")
    g.add_argument("--sample-pixels", dest="sample_pixels", type=int)
    g.add_argument("--color-space", dest="color_space", choices=["rgb", "lab"])
    g.add_argument("--threshold", type=float, help="ripeness risk threshold")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, help="worker threads")
    g.add_argument("--log-level", dest="log_level")
    return common


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="cranberry", description="Cranberry ripening assessment from calibrated bog imagery.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--manifest", action="store_true", help="print the manifest of the last run and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("calibrate", parents=[common], help="fit a session's radiometric correction")
    p.add_argument("--card", required=True, help="ColorChecker image of the session")
    p.add_argument("--patches", required=True, help="JSON list of the 6 grey patch rectangles, lightest first")
    p.add_argument("--session-id", dest="session_id", default="")
    p.add_argument("--out", default="calibration.json")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic season dataset")
    p.add_argument("--bogs", type=int, default=2)
    p.add_argument("--dates", type=int, default=6)
    p.add_argument("--n-berries", dest="n_berries", type=int)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float, default=0.15)
    p.add_argument("--jitter", type=float, default=0.03)
    p.add_argument("--mixture", help="fixed class mixture c1,c2,c3,c4,c5 for every date")
    p.add_argument("--no-distortion", dest="no_distortion", action="store_true")

    sub.add_parser("train", parents=[common], help="fit the pixel scorer and color model")
    sub.add_parser("segment", parents=[common], help="segment every crop and save the masks")

    p = sub.add_parser("classify", parents=[common], help="classify berries of saved masks")
    p.add_argument("--masks", help="mask directory (default OUTPUT_DIR/masks)")

    p = sub.add_parser("run", parents=[common], help="run the whole pipeline")
    p.add_argument("--train", action="store_true", help="fit scorer and color model from the labeled crops")
    p.add_argument("--manifest", dest="print_manifest", action="store_true", help="print the run manifest")

    p = sub.add_parser("eval", parents=[common], help="compare predicted and truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)

    p = sub.add_parser("report", parents=[common], help="ripeness reports from a histogram CSV")
    p.add_argument("--histograms", help="histogram CSV (default OUTPUT_DIR/histograms.csv)")

    p = sub.add_parser("serve", parents=[common], help="serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def settings_from_args(args: argparse.Namespace) -> Settings:
    overrides = {field: getattr(args, dest, None) for dest, field in SETTING_FLAGS.items()}
    return load_settings(getattr(args, "config", None), overrides)


def _emit(value) -> None:
    if hasattr(value, "model_dump_json"):
        print(value.model_dump_json(indent=2))
    else:
        print(json.dumps(value, indent=2, default=str))


# --- commands ---


def cmd_calibrate(args, settings: Settings) -> int:
    reference = load_grey_reference(settings.GREY_REFERENCE_PATH)
    measured = measure_grey_patches(read_png(args.card), load_patch_rects(args.patches), args.session_id)
    corr = fit_correction(measured, reference)
    save_correction(corr, args.out)
    _emit(corr)
    return EXIT_OK


def cmd_synth(args, settings: Settings) -> int:
    mixture = None
    try:
        if args.mixture:
            mixture = tuple(float(v) for v in args.mixture.split(","))
        spec = SceneSpec(
            n_berries=args.n_berries,
            occlusion_rate=args.occlusion_rate,
            jitter=args.jitter,
            width=settings.CROP_WIDTH,
            height=settings.CROP_HEIGHT,
            **({"class_mixture": mixture} if mixture else {}),
        )
    except (ValueError, ValidationError) as e:
        raise UsageError(f"invalid scene options: {e}") from e
    if args.bogs < 1 or args.dates < 1:
        raise UsageError("--bogs and --dates must be positive")

    scripts = synthesize_dataset(
        settings.DATA_ROOT,
        args.bogs,
        args.dates,
        spec,
        settings.SEED,
        load_grey_reference(settings.GREY_REFERENCE_PATH),
        load_palette(settings.PALETTE_PATH),
        mixture=mixture,
        distort_sessions=not args.no_distortion,
    )
    _emit({"root": settings.DATA_ROOT, "bogs": [s.bog_id for s in scripts], "sessions": args.bogs * args.dates})
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    settings.validate_paths(need_models=False)
    index = load_dataset(settings.DATA_ROOT)
    corrections = session_corrections(index, settings)
    scorer = train_from_points(index, corrections, settings)
    save_scorer(scorer, settings.SCORER_PATH)
    model = fit_color_model(segment_dataset(index, corrections, scorer, settings), settings)
    save_color_model(model, settings.COLOR_MODEL_PATH)
    _emit(
        {
            "scorer": settings.SCORER_PATH,
            "color_model": settings.COLOR_MODEL_PATH,
            "final_loss": scorer.training_loss_history[-1] if scorer.training_loss_history else None,
            "class_map": model.class_map,
        }
    )
    return EXIT_OK


def cmd_segment(args, settings: Settings) -> int:
    settings.validate_paths(need_models=False)
    index = load_dataset(settings.DATA_ROOT)
    results = segment_dataset(
        index, session_corrections(index, settings), load_scorer(settings.SCORER_PATH), settings
    )
    out = Path(settings.OUTPUT_DIR)
    for r in results:
        save_mask(r.mask, mask_path(out, r.crop.image_id))
    rows = [
        (r.crop.image_id, r.entry.meta.bog_id, r.entry.meta.date.isoformat(), len(r.mask.instances)) for r in results
    ]
    reports.write_counts_csv(rows, out / reports.COUNTS_CSV)
    _emit({"crops": len(results), "berries": sum(row[3] for row in rows)})
    return EXIT_OK


def cmd_classify(args, settings: Settings) -> int:
    settings.validate_paths(need_models=False)
    index = load_dataset(settings.DATA_ROOT)
    masks = load_masks(args.masks or Path(settings.OUTPUT_DIR) / reports.MASKS_DIR)
    results = crops_with_masks(index, session_corrections(index, settings), masks, settings)
    hists = classify_results(results, load_color_model(settings.COLOR_MODEL_PATH), settings.JOBS)
    write_histograms_csv(hists, Path(settings.OUTPUT_DIR) / reports.HISTOGRAMS_CSV)
    _emit({"sessions": len(hists), "berries": sum(h.berry_count for h in hists)})
    return EXIT_OK


def cmd_run(args, settings: Settings) -> int:
    result = run_pipeline(settings, train=args.train)
    if args.print_manifest:
        _emit(result.manifest)
    else:
        print(
            f"{len(result.histograms)} sessions, {len(result.series)} bogs with a ripeness series, "
            f"reports in {result.output_dir}"
        )
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    preds, truths = load_masks(args.pred), load_masks(args.truth)
    if not truths:
        raise DatasetError(f"no truth masks under {args.truth}")
    if set(preds) != set(truths):
        missing = sorted(set(truths) - set(preds))
        extra = sorted(set(preds) - set(truths))
        raise DatasetError(f"prediction and truth masks differ: missing {missing[:5]}, unexpected {extra[:5]}")
    ids = sorted(truths)
    _emit(evaluate([preds[i] for i in ids], [truths[i] for i in ids]))
    return EXIT_OK


def cmd_report(args, settings: Settings) -> int:
    out = Path(settings.OUTPUT_DIR)
    path = Path(args.histograms) if args.histograms else out / reports.HISTOGRAMS_CSV
    if not path.exists():
        raise UsageError(f"histogram CSV not found: {path}")
    raw = read_histograms_csv(path)
    data_root = Path(settings.DATA_ROOT)
    varieties = {
        bog: read_bog_variety(data_root / bog) if (data_root / bog).is_dir() else None
        for bog in sorted({h.bog_id for h in raw})
    }
    hists = [h.model_copy(update={"variety": varieties[h.bog_id]}) for h in raw]
    cfg = settings.risk_config()
    series = build_series(hists, cfg)
    for bog in sorted(varieties):
        bog_hists = [h for h in hists if h.bog_id == bog]
        reports.write_text(out / reports.histograms_svg_name(bog), reports.render_histograms_svg(bog, bog_hists))
    write_ripeness_csv(series, out / reports.RIPENESS_CSV)
    reports.write_json(out / reports.RISK_JSON, risk_report(series), list[RiskRecord])
    reports.write_json(out / reports.VARIETIES_JSON, variety_comparison(series), list[VarietyRisk])
    reports.write_text(out / reports.RIPENESS_SVG, reports.render_ripeness_svg(series, cfg.threshold))
    _emit([r.model_dump(mode="json") for r in risk_report(series)])
    return EXIT_OK


def cmd_serve(args, settings: Settings) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
    return EXIT_OK


def print_last_manifest(settings: Settings) -> int:
    path = Path(settings.OUTPUT_DIR) / reports.MANIFEST_JSON
    try:
        manifest = RunManifest.model_validate_json(path.read_bytes())
    except (OSError, ValidationError) as e:
        raise DatasetError(f"no readable run manifest at {path}: {e}") from e
    _emit(manifest)
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "synth": cmd_synth,
    "train": cmd_train,
    "segment": cmd_segment,
    "classify": cmd_classify,
    "run": cmd_run,
    "eval": cmd_eval,
    "report": cmd_report,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None and not args.manifest:
        parser.error("a command is required")

    try:
        settings = settings_from_args(args)
        logging.basicConfig(
            level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if args.command is None:
            return print_last_manifest(settings)
        return COMMANDS[args.command](args, settings)
    except CranberryError as e:
        logger.error("%s", e.detail)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
