import csv
import os
import shutil
from pathlib import Path

from jinja2 import Environment, FileSystemLoader
from pydantic import BaseModel, TypeAdapter, ValidationError

from app.schemas import ClassHistogram, RipenessSeries, RunManifest

TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), "templates")
templates = Environment(
    loader=FileSystemLoader(TEMPLATE_DIR),
    autoescape=True,
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)

RIPENESS_CSV = "ripeness.csv"
HISTOGRAMS_CSV = "histograms.csv"
COUNTS_CSV = "counts.csv"
RISK_JSON = "risk.json"
VARIETIES_JSON = "varieties.json"
SUMMARY_JSON = "summary.json"
EVAL_JSON = "eval.json"
ORACLE_JSON = "oracle.json"
MANIFEST_JSON = "manifest.json"
RIPENESS_SVG = "ripeness.svg"
MASKS_DIR = "masks"
BUNDLE_FILES = [
    RIPENESS_CSV,
    HISTOGRAMS_CSV,
    COUNTS_CSV,
    RISK_JSON,
    VARIETIES_JSON,
    SUMMARY_JSON,
    EVAL_JSON,
    ORACLE_JSON,
    MANIFEST_JSON,
    RIPENESS_SVG,
]

CLASS_COLORS = ["#6a9e3a", "#b8b23c", "#d98a3a", "#c8472f", "#7d1424"]
SERIES_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f"]


def _n(value: float) -> str:
    return f"{value:.2f}"


def histograms_svg_name(bog_id: str) -> str:
    return f"histograms_{bog_id}.svg"


def render_histograms_svg(bog_id: str, hists: list[ClassHistogram]) -> str:
    """One panel per date (left to right), five class bars per panel."""
    margin, top = 12, 28
    plot_height, panel_width, panel_gap = 120, 90, 16
    bar_width = panel_width / 5 - 2
    panels = []
    for i, h in enumerate(sorted(hists, key=lambda h: h.date)):
        bars = []
        for c, fraction in enumerate(h.fractions):
            height = fraction * plot_height
            bars.append(
                {
                    "cls": c + 1,
                    "x": _n(c * (bar_width + 2) + 1),
                    "y": _n(plot_height - height),
                    "h": _n(height),
                    "fill": CLASS_COLORS[c],
                    "label": f"{fraction:.3f}",
                }
            )
        panels.append(
            {
                "x": _n(margin + i * (panel_width + panel_gap)),
                "date": h.date.isoformat(),
                "count": h.berry_count,
                "bars": bars,
            }
        )
    varieties = {h.variety.value for h in hists if h.variety is not None}
    return templates.get_template("histograms.svg.j2").render(
        bog=bog_id,
        variety=varieties.pop() if len(varieties) == 1 else None,
        panels=panels,
        margin=margin,
        top=top,
        plot_height=plot_height,
        panel_width=panel_width,
        bar_width=_n(bar_width),
        width=2 * margin + max(len(panels), 1) * (panel_width + panel_gap),
        height=top + plot_height + 36,
    )


def render_ripeness_svg(all_series: list[RipenessSeries], threshold: float) -> str:
    left, top, plot_w, plot_h = 48, 16, 480, 240
    right, bottom = left + plot_w, top + plot_h
    dates = sorted({d for s in all_series for d in s.dates})
    y_max = max([1.2, threshold, *(r for s in all_series for r in s.ratios)])

    span = (dates[-1] - dates[0]).days if len(dates) > 1 else 0

    def x_of(d) -> float:
        return left + (plot_w * (d - dates[0]).days / span if span else plot_w / 2)

    def y_of(r: float) -> float:
        return bottom - plot_h * r / y_max

    lines = []
    for i, s in enumerate(all_series):
        label = s.bog_id + (f" {s.variety.value}" if s.variety else "")
        lines.append(
            {
                "points": " ".join(f"{_n(x_of(d))},{_n(y_of(r))}" for d, r in zip(s.dates, s.ratios)),
                "color": SERIES_COLORS[i % len(SERIES_COLORS)],
                "label": label,
                "label_y": _n(y_of(s.ratios[-1])),
            }
        )
    y_ticks = [{"y": _n(y_of(v) + 4), "label": f"{v:.1f}"} for v in [0.0, 0.5, 1.0] if v <= y_max]
    x_ticks = [{"x": _n(x_of(d)), "label": d.strftime("%m/%d")} for d in dates]
    return templates.get_template("ripeness.svg.j2").render(
        lines=lines,
        left=left,
        right=right,
        top=top,
        bottom=bottom,
        width=right + 140,
        height=bottom + 30,
        threshold=threshold,
        threshold_y=_n(y_of(threshold)),
        y_ticks=y_ticks,
        x_ticks=x_ticks,
    )


def write_text(path: str | os.PathLike, text: str) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def write_json(path: str | os.PathLike, value, kind=None) -> None:
    """Pydantic-dumped JSON; ``kind`` gives the type of plain lists of models."""
    if isinstance(value, BaseModel):
        data = value.model_dump_json(indent=2)
    else:
        data = TypeAdapter(kind or type(value)).dump_json(value, indent=2).decode()
    write_text(path, data + "\n")


def write_counts_csv(rows: list[tuple[str, str, str, int]], path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "bog", "date", "count"])
        writer.writerows(rows)


def clear_bundle(directory: str | os.PathLike) -> None:
    """Remove the report bundle of a previous run; other entries (nested runs) stay."""
    directory = Path(directory)
    if not directory.is_dir():
        return
    stale = {directory / name for name in [*BUNDLE_FILES, MASKS_DIR]}
    stale.update(directory.glob(histograms_svg_name("*")))
    try:
        previous = RunManifest.model_validate_json((directory / MANIFEST_JSON).read_bytes())
        for rel in previous.outputs:
            parts = Path(rel).parts
            if parts and not Path(rel).is_absolute() and parts[0] not in (".", ".."):
                stale.add(directory / parts[0])
    except (OSError, ValidationError):
        pass
    for path in sorted(stale):
        if path.is_dir() and not path.is_symlink():
            shutil.rmtree(path)
        elif path.exists() or path.is_symlink():
            path.unlink()
