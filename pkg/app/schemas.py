import datetime as dt
import math
from enum import Enum
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

N_CLASSES = 5
N_GREY_PATCHES = 6
MIN_PATCH_PIXELS = 25

RGB = tuple[float, float, float]


def luminance(rgb) -> float:
    r, g, b = rgb
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


def redness(rgb, eps: float = 1e-6) -> float:
    r, g, b = rgb
    return r / (r + g + b + eps)


def _check_simplex(values, name: str) -> None:
    if len(values) != N_CLASSES:
        raise ValueError(f"{name} needs {N_CLASSES} entries")
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise ValueError(f"{name} entries must be finite and non-negative")
    if abs(sum(values) - 1.0) > 1e-6:
        raise ValueError(f"{name} must sum to 1")


# --- imaging-core ---


class Variety(str, Enum):
    MULLICA_QUEEN = "MullicaQueen"
    STEVENS = "Stevens"
    CRIMSON_QUEEN = "CrimsonQueen"
    HAINES = "Haines"


class CaptureMeta(BaseModel):
    bog_id: str = Field(min_length=1)
    variety: Variety | None = None
    date: dt.date
    source_frame: str = ""


class PointAnnotation(BaseModel):
    image_id: str
    points: list[tuple[float, float]] = []

    @field_validator("points")
    @classmethod
    def no_duplicates(cls, points):
        if len(set(points)) != len(points):
            raise ValueError("duplicate annotation points")
        return points

    def out_of_bounds(self, width: int, height: int) -> list[tuple[float, float]]:
        return [(x, y) for x, y in self.points if not (0 <= x < width and 0 <= y < height)]


class DatasetEntry(BaseModel):
    image_id: str
    path: str
    width: int
    height: int
    meta: CaptureMeta
    annotation: PointAnnotation | None = None

    @property
    def labeled(self) -> bool:
        return self.annotation is not None

    @property
    def session_id(self) -> str:
        return f"{self.meta.bog_id}/{self.meta.date.isoformat()}"


class DatasetIndex(BaseModel):
    root: str
    entries: list[DatasetEntry] = []

    def sessions(self) -> dict[str, list[DatasetEntry]]:
        grouped: dict[str, list[DatasetEntry]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.session_id, []).append(entry)
        return grouped


class DatasetSummary(BaseModel):
    total_images: int
    labeled_images: int
    bogs: list[str]
    varieties: dict[str, str | None]
    first_date: dt.date | None
    last_date: dt.date | None
    dates: list[dt.date]


# --- calibration ---


class PatchRect(BaseModel):
    x: int = Field(ge=0)
    y: int = Field(ge=0)
    w: int = Field(ge=1)
    h: int = Field(ge=1)


class GreyReference(BaseModel):
    values: list[float]

    @field_validator("values")
    @classmethod
    def strictly_decreasing(cls, values):
        if len(values) != N_GREY_PATCHES:
            raise ValueError(f"grey reference needs {N_GREY_PATCHES} values")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("grey reference values must lie in [0, 1]")
        if any(a <= b for a, b in zip(values, values[1:])):
            raise ValueError("grey reference must be strictly decreasing")
        return values


class GreyPatchMeasurement(BaseModel):
    session_id: str
    means: list[RGB]
    pixel_counts: list[int]

    @model_validator(mode="after")
    def check_patches(self):
        if len(self.means) != N_GREY_PATCHES or len(self.pixel_counts) != N_GREY_PATCHES:
            raise ValueError(f"exactly {N_GREY_PATCHES} grey patches are required")
        if any(c < MIN_PATCH_PIXELS for c in self.pixel_counts):
            raise ValueError(f"every patch needs at least {MIN_PATCH_PIXELS} pixels")
        if any(not 0.0 <= v <= 1.0 for rgb in self.means for v in rgb):
            raise ValueError("patch means must lie in [0, 1]")
        lum = [luminance(m) for m in self.means]
        if any(a <= b for a, b in zip(lum, lum[1:])):
            raise ValueError("patch luminance must decrease from lightest to darkest")
        return self


class RadiometricCorrection(BaseModel):
    session_id: str
    gain: RGB
    offset: RGB
    residual_rms: float = Field(ge=0.0)
    # Corrected values live on the grey-reference scale, not reflectance
    target: Literal["grey-reference"] = "grey-reference"
    reference: list[float] | None = None

    @field_validator("gain")
    @classmethod
    def positive_gain(cls, gain):
        if any(g <= 0 for g in gain):
            raise ValueError("gains must be strictly positive")
        return gain

    @classmethod
    def identity(cls, session_id: str = "identity") -> "RadiometricCorrection":
        return cls(session_id=session_id, gain=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0), residual_rms=0.0)


# --- segmentation ---


class SegParams(BaseModel):
    tau: float = Field(default=0.5, gt=0.0, lt=1.0)
    kappa: float = Field(default=0.8, gt=0.0, le=1.0)
    min_area: int = Field(default=30, ge=1)
    r_fg: int = Field(default=6, ge=1)
    r_ig: int = Field(default=4, ge=0)
    seed_separation: int = Field(default=4, ge=1)


class PixelScorer(BaseModel):
    weights: list[float] = [0.0] * 7
    trained: bool = False
    training_loss_history: list[float] = []
    epochs: int = 0
    learning_rate: float = 0.0
    seed: int = 0

    @field_validator("weights")
    @classmethod
    def seven_finite(cls, weights):
        if len(weights) != 7 or not all(math.isfinite(w) for w in weights):
            raise ValueError("scorer needs 7 finite weights")
        return weights


class InstanceRecord(BaseModel):
    id: int
    centroid: tuple[float, float]
    area: int
    convexity: float
    mean_rgb: RGB


class MaskTable(BaseModel):
    image_id: str
    width: int
    height: int
    instances: list[InstanceRecord] = []


class ImageEval(BaseModel):
    image_id: str
    iou: float
    count_error: int


class EvalReport(BaseModel):
    miou: float
    count_mae: float
    per_image: list[ImageEval] = []
    count_unit: Literal["per-crop"] = "per-crop"


# --- albedo ---


class ColorClassModel(BaseModel):
    centroids: list[RGB]
    centroids_rgb: list[RGB]
    class_map: list[int]
    class_centroids: list[RGB]
    seed: int
    k: int
    color_space: Literal["rgb", "lab"] = "rgb"
    cluster_sizes: list[int] = []
    objective_history: list[float] = []

    @model_validator(mode="after")
    def check_classes(self):
        if len(self.class_map) != len(self.centroids) or len(self.centroids) != self.k:
            raise ValueError("class_map must cover every raw centroid")
        if set(self.class_map) != set(range(1, N_CLASSES + 1)):
            raise ValueError("every albedo class needs at least one centroid")
        if len(self.class_centroids) != N_CLASSES:
            raise ValueError(f"{N_CLASSES} class centroids required")
        rho = [redness(c) for c in self.class_centroids]
        if any(a >= b for a, b in zip(rho, rho[1:])):
            raise ValueError("class centroids must increase in redness")
        return self


class BerryClassification(BaseModel):
    instance_id: int
    albedo_class: int = Field(ge=1, le=N_CLASSES)
    vote_fractions: list[float]
    bog_id: str | None = None
    date: dt.date | None = None


class ClassHistogram(BaseModel):
    bog_id: str
    date: dt.date
    variety: Variety | None = None
    fractions: list[float]
    berry_count: int = Field(ge=0)

    @model_validator(mode="after")
    def check_fractions(self):
        if len(self.fractions) != N_CLASSES:
            raise ValueError(f"histogram needs {N_CLASSES} fractions")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in [0, 1]")
        if self.berry_count > 0 and abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")
        if self.berry_count == 0 and any(self.fractions):
            raise ValueError("empty histogram must be all zero")
        return self


# --- ripeness-timeline ---


class RiskConfig(BaseModel):
    threshold: float = Field(default=0.6, gt=0.0, le=1.5)
    red_classes: tuple[int, ...] = (4, 5)

    @field_validator("red_classes")
    @classmethod
    def known_classes(cls, classes):
        if not classes or any(not 1 <= c <= N_CLASSES for c in classes):
            raise ValueError("red classes must be albedo classes 1..5")
        return tuple(sorted(set(classes)))


class RipenessSeries(BaseModel):
    bog_id: str
    variety: Variety | None = None
    dates: list[dt.date]
    red_fractions: list[float]
    ratios: list[float]
    risk_dates: list[dt.date] = []
    threshold: float = 0.6

    @model_validator(mode="after")
    def check_series(self):
        if not (len(self.dates) == len(self.red_fractions) == len(self.ratios)):
            raise ValueError("dates, red fractions and ratios must align")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")
        return self


class SeriesRequest(BaseModel):
    histograms: list[ClassHistogram]
    threshold: float = Field(default=0.6, gt=0.0, le=1.5)


class FirstRiskResponse(BaseModel):
    bog: str
    first_risk_date: dt.date | None


class VarietyRisk(BaseModel):
    variety: Variety
    mean_day_of_year: float
    mean_first_risk_date: dt.date
    n_series: int


class RiskRecord(BaseModel):
    bog: str
    variety: Variety | None
    first_risk_date: dt.date | None
    threshold: float


# --- synth-oracle ---


class SceneSpec(BaseModel):
    n_berries: int | None = Field(default=None, ge=0)
    n_range: tuple[int, int] = (80, 160)
    radius_range: tuple[float, float] = (5.0, 9.0)
    class_mixture: tuple[float, float, float, float, float] = (0.2, 0.2, 0.2, 0.2, 0.2)
    jitter: float = Field(default=0.03, ge=0.0, le=0.2)
    occlusion_rate: float = Field(default=0.15, ge=0.0, le=1.0)
    max_aspect: float = Field(default=1.1, ge=1.0, le=1.5)
    width: int = Field(default=456, ge=16)
    height: int = Field(default=608, ge=16)
    seed: int = 0
    max_attempts: int = Field(default=20_000, ge=1)

    @field_validator("class_mixture")
    @classmethod
    def simplex(cls, mixture):
        _check_simplex(mixture, "class mixture")
        return mixture

    @model_validator(mode="after")
    def check_ranges(self):
        lo, hi = self.radius_range
        if not 1.0 <= lo <= hi:
            raise ValueError("radius range must satisfy 1 <= min <= max")
        if not 0 <= self.n_range[0] <= self.n_range[1]:
            raise ValueError("berry count range must satisfy 0 <= min <= max")
        return self


class Palette(BaseModel):
    classes: list[RGB]
    leaf: RGB
    leaf_noise: RGB = (0.05, 0.06, 0.03)

    @field_validator("classes")
    @classmethod
    def green_to_red(cls, classes):
        if len(classes) != N_CLASSES:
            raise ValueError(f"palette needs {N_CLASSES} class colors")
        rho = [redness(c) for c in classes]
        if any(a >= b for a, b in zip(rho, rho[1:])):
            raise ValueError("palette colors must increase in redness")
        return classes


class BerrySpec(BaseModel):
    center: tuple[float, float]
    radius: float
    semi_axes: tuple[float, float]
    angle: float
    albedo_class: int = Field(ge=1, le=N_CLASSES)
    base_rgb: RGB
    occludes: int | None = None


class SeasonScript(BaseModel):
    bog_id: str
    variety: Variety | None = None
    dates: list[dt.date]
    mixtures: list[tuple[float, float, float, float, float]]

    @model_validator(mode="after")
    def check_script(self):
        if len(self.dates) != len(self.mixtures):
            raise ValueError("one mixture per date is required")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("season dates must be strictly increasing")
        for mixture in self.mixtures:
            _check_simplex(mixture, "season mixture")
        return self


class OracleReport(BaseModel):
    bog_id: str
    dates: list[dt.date]
    analytic_ratios: list[float] = []
    pipeline_ratios: list[float] = []
    per_date_errors: list[float] = []
    max_ratio_error: float = math.inf
    analytic_first_risk: dt.date | None = None
    pipeline_first_risk: dt.date | None = None
    first_risk_index_error: int | None = None
    error: str | None = None


# --- cli-reports ---


class RunManifest(BaseModel):
    version: str
    config_hash: str
    inputs_hash: str
    manifest_hash: str
    packages: dict[str, str]
    settings: dict
    outputs: list[str] = []
