import hashlib
import json
import logging
import tomllib
from enum import StrEnum
from pathlib import Path
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from facefit.constants import BACKGROUND, DIFFUSE_SMOOTHING, FOCAL_RATIO, SHININESS, TEXTURE_RESOLUTION, W_INIT_SAMPLES
from facefit.errors import ConfigError
from facefit.renderer import RenderOptions, Shading

logger = logging.getLogger(__name__)


class Preset(StrEnum):
    """
    Iteration count presets.

    MAIN_TEXT: 200 inversion and 20 tuning iterations.
    SUPPLEMENTAL: 250 inversion and 30 tuning iterations.
    """

    MAIN_TEXT = "main-text"
    SUPPLEMENTAL = "supplemental"


class LatentMode(StrEnum):
    """
    Latent parameterization during inversion.

    LEVELS: One optimized row per generator level.
    SHARED: One optimized row broadcast to every level.
    """

    LEVELS = "levels"
    SHARED = "shared"


PRESET_ITERATIONS: dict[Preset, tuple[int, int]] = {
    Preset.MAIN_TEXT: (200, 20),
    Preset.SUPPLEMENTAL: (250, 30),
}

INVERSION_TERMS: tuple[str, ...] = ("landmark", "photometric", "identity", "perceptual", "latent_reg", "shape_reg", "expression_reg")
TUNING_TERMS: tuple[str, ...] = ("lpips", "tune_photometric", "flip", "chroma")


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    landmark: float = Field(default=100.0, ge=0.0)
    photometric: float = Field(default=0.5, ge=0.0)
    identity: float = Field(default=1.0, ge=0.0)
    perceptual: float = Field(default=25.0, ge=0.0)
    latent_reg: float = Field(default=5e-2, ge=0.0)
    shape_reg: float = Field(default=5e-4, ge=0.0)
    expression_reg: float = Field(default=5e-4, ge=0.0)
    lpips: float = Field(default=2.0, ge=0.0)
    tune_photometric: float = Field(default=0.5, ge=0.0)
    flip: float = Field(default=0.8, ge=0.0)
    chroma: float = Field(default=0.35, ge=0.0)
    lr_inv: float = Field(default=1e-2, gt=0.0)
    lr_tune: float = Field(default=8e-4, gt=0.0)
    iters_inv: int = Field(default=200, ge=0)
    iters_tune: int = Field(default=20, ge=0)
    resolution: int = Field(default=TEXTURE_RESOLUTION, ge=8)
    focal_ratio: float = Field(default=FOCAL_RATIO, gt=0.0)
    shininess_init: float = Field(default=SHININESS, gt=0.0)
    diffuse_smoothing: int = Field(default=DIFFUSE_SMOOTHING, ge=0)
    w_init_samples: int = Field(default=W_INIT_SAMPLES, ge=1)
    bank_seed: int = Field(default=0, ge=0)
    background: tuple[float, float, float] = BACKGROUND
    clamp_diffuse: bool = True
    per_image_expression: bool = False
    enable_tuning: bool = True
    latent_mode: LatentMode = LatentMode.LEVELS
    shading: Shading = Shading.BLINN_PHONG
    progress: bool = True

    @classmethod
    def from_preset(cls, preset: Preset | str, **overrides: Any) -> Self:
        iters_inv, iters_tune = PRESET_ITERATIONS[Preset(preset)]
        return cls.model_validate({"iters_inv": iters_inv, "iters_tune": iters_tune, **overrides})

    def inversion_weights(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in INVERSION_TERMS}

    def tuning_weights(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TUNING_TERMS}

    def render_options(self) -> RenderOptions:
        return RenderOptions(background=self.background, smoothing=self.diffuse_smoothing, clamp_diffuse=self.clamp_diffuse, shading=self.shading)


class PathsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    shape_model: Path | None = None
    generator: Path | None = None
    targets: list[Path] = Field(default_factory=list)
    landmarks: list[Path] = Field(default_factory=list)
    output_dir: Path = Path("out")


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    paths: PathsConfig = Field(default_factory=PathsConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    seed: int = Field(default=0, ge=0, lt=2**64)
    preset: Preset = Preset.MAIN_TEXT

    def validate_paths(self) -> None:
        missing = [
            path
            for path in (self.paths.shape_model, self.paths.generator, *self.paths.targets, *self.paths.landmarks)
            if path is None or not Path(path).exists()
        ]
        if missing:
            msg = f"missing inputs: {', '.join(str(path) for path in missing)}"
            raise ConfigError(msg)
        if not self.paths.targets:
            msg = "at least one target image is required"
            raise ConfigError(msg)
        if len(self.paths.targets) != len(self.paths.landmarks):
            msg = f"{len(self.paths.targets)} targets but {len(self.paths.landmarks)} landmark files"
            raise ConfigError(msg)

    def canonical(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides: Any) -> Self:
        """New config with flag values applied; `fit` and `paths` entries merge field by field."""
        data = self.canonical()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in {"fit", "paths"}:
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return validated(type(self), data, "flags")


def validated[T: BaseModel](model: type[T], data: dict[str, Any], source: str) -> T:
    try:
        return model.model_validate(data)
    except ValidationError as error:
        msg = f"invalid configuration in {source}: {error}"
        raise ConfigError(msg) from error


def load_config(path: str | Path) -> RunConfig:
    """TOML or JSON run configuration; a run manifest is accepted through its `config` entry."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        msg = f"cannot read config {path}: {error}"
        raise ConfigError(msg) from error
    match path.suffix.lower():
        case ".toml":
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as error:
                msg = f"malformed TOML in {path}: {error}"
                raise ConfigError(msg) from error
        case ".json":
            try:
                data = json.loads(text)
            except json.JSONDecodeError as error:
                msg = f"malformed JSON in {path}: {error}"
                raise ConfigError(msg) from error
            data = data.get("config", data)
        case suffix:
            msg = f"unsupported config format {suffix!r}"
            raise ConfigError(msg)
    preset = data.get("preset")
    if preset is not None:
        if preset not in set(Preset):
            msg = f"unknown preset {preset!r} in {path}"
            raise ConfigError(msg)
        iters_inv, iters_tune = PRESET_ITERATIONS[Preset(preset)]
        data = {**data, "fit": {"iters_inv": iters_inv, "iters_tune": iters_tune, **data.get("fit", {})}}
    logger.info("Loaded configuration %s", path)
    return validated(RunConfig, data, str(path))
