import json
import os
import sys
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from app.errors import UsageError
from app.schemas import RiskConfig, SegParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


class Settings(BaseSettings):
    DATA_ROOT: str = "data"
    OUTPUT_DIR: str = "reports"
    SCORER_PATH: str = "models/scorer.json"
    COLOR_MODEL_PATH: str = "models/color_model.json"
    GREY_REFERENCE_PATH: str = os.path.join(DATA_DIR, "grey_reference.json")
    PALETTE_PATH: str = os.path.join(DATA_DIR, "palette.json")

    CROP_WIDTH: int = Field(default=456, ge=1)
    CROP_HEIGHT: int = Field(default=608, ge=1)

    # Same bounds as SegParams and RiskConfig, checked when settings load
    TAU: float = Field(default=0.5, gt=0.0, lt=1.0)
    KAPPA: float = Field(default=0.8, gt=0.0, le=1.0)
    MIN_AREA: int = Field(default=30, ge=1)
    R_FG: int = Field(default=6, ge=1)
    R_IG: int = Field(default=4, ge=0)
    SEED_SEPARATION: int = Field(default=4, ge=1)

    EPOCHS: int = Field(default=300, ge=0)
    LEARNING_RATE: float = Field(default=0.5, gt=0.0)
    MAX_TRAIN_PIXELS: int = Field(default=200_000, ge=1)

    K_CLUSTERS: int = Field(default=10, ge=5)
    SAMPLE_PIXELS: int = Field(default=20_000, ge=1)
    COLOR_SPACE: Literal["rgb", "lab"] = "rgb"

    RISK_THRESHOLD: float = Field(default=0.6, gt=0.0, le=1.5)

    SEED: int = 0
    JOBS: int = Field(default=1, ge=1)
    LOG_LEVEL: str = "INFO"
    CORS_ORIGINS: str = "http://localhost:3000,http://127.0.0.1:3000"

    model_config = {"env_file": ".env", "env_file_encoding": "utf-8"}

    def seg_params(self) -> SegParams:
        return SegParams(
            tau=self.TAU,
            kappa=self.KAPPA,
            min_area=self.MIN_AREA,
            r_fg=self.R_FG,
            r_ig=self.R_IG,
            seed_separation=self.SEED_SEPARATION,
        )

    def risk_config(self) -> RiskConfig:
        return RiskConfig(threshold=self.RISK_THRESHOLD)

    def validate_paths(self, *, need_models: bool = True) -> None:
        required = [self.DATA_ROOT, self.GREY_REFERENCE_PATH]
        if need_models:
            required += [self.SCORER_PATH, self.COLOR_MODEL_PATH]
        missing = [p for p in required if not os.path.exists(p)]
        if missing:
            raise UsageError(f"missing configured path(s): {', '.join(missing)}")

    def fingerprint_fields(self) -> dict[str, Any]:
        # Output location and worker count do not change results
        return self.model_dump(exclude={"OUTPUT_DIR", "JOBS", "LOG_LEVEL", "CORS_ORIGINS"})


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot parse config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a table/object")
    return {key.upper(): value for key, value in data.items()}


def load_settings(
    config_file: str | os.PathLike | None = None,
    overrides: dict[str, Any] | None = None,
) -> Settings:
    values = read_config_file(config_file) if config_file else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        settings = Settings(**values)
        settings.seg_params()
        settings.risk_config()
    except ValidationError as e:
        raise UsageError(f"invalid configuration: {e}") from e
    return settings


@lru_cache
def get_settings() -> Settings:
    return Settings()
