__all__: list[str] = [
    "Adam",
    "ArrayContainer",
    "AssetIOError",
    "Camera",
    "ConfigError",
    "ContractViolation",
    "DomainError",
    "ExitCode",
    "FaceFitError",
    "FilterBank",
    "FitConfig",
    "FitState",
    "LatentMode",
    "Lighting",
    "Models",
    "PcaShapeModel",
    "Preset",
    "PyramidGenerator",
    "ReflectanceMaps",
    "RenderOptions",
    "Rendering",
    "RunConfig",
    "Scope",
    "ShapeCoeffs",
    "SkinToneTarget",
    "Stage",
    "Target",
    "Tensor",
    "augment_albedo",
    "backward",
    "build_fixture",
    "fit",
    "fit_generator",
    "fit_inversion",
    "fit_multi",
    "fit_tuning",
    "histogram_match",
    "interpolate_fit",
    "latent_pca",
    "load_config",
    "manipulate",
    "project",
    "project_landmarks",
    "reconstruct_shape",
    "render",
    "render_state",
    "run_gradcheck",
    "skin_mask",
    "vertex_normals",
]

from facefit.augment import (
    SkinToneTarget,
    augment_albedo,
    histogram_match,
    skin_mask,
)
from facefit.camera import Camera, Lighting
from facefit.config import (
    FitConfig,
    LatentMode,
    Preset,
    RunConfig,
    load_config,
)
from facefit.container import ArrayContainer
from facefit.errors import (
    AssetIOError,
    ConfigError,
    ContractViolation,
    DomainError,
    ExitCode,
    FaceFitError,
)
from facefit.features import FilterBank
from facefit.fitting import (
    FitState,
    Models,
    Stage,
    Target,
    fit,
    fit_inversion,
    fit_multi,
    fit_tuning,
    interpolate_fit,
    render_state,
)
from facefit.gradcheck import Scope, run_gradcheck
from facefit.optim import Adam
from facefit.reflectance import (
    PyramidGenerator,
    ReflectanceMaps,
    fit_generator,
    latent_pca,
    manipulate,
    project,
)
from facefit.renderer import RenderOptions, Rendering, render
from facefit.shape import (
    PcaShapeModel,
    ShapeCoeffs,
    project_landmarks,
    reconstruct_shape,
    vertex_normals,
)
from facefit.synthetic import build_fixture
from facefit.tensor import Tensor, backward
