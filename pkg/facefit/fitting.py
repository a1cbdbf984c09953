import csv
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from functools import cache
from pathlib import Path
from typing import Self

import cv2
import numpy as np
from tqdm import tqdm

from facefit.camera import Camera, Lighting
from facefit.config import FitConfig, LatentMode
from facefit.constants import CHECKPOINT_MAGIC, EPSILON, POSE_LANDMARKS
from facefit.container import ArrayContainer
from facefit.errors import AssetIOError, ContractViolation, DomainError
from facefit.features import FilterBank, conv2d_fixed, to_chw
from facefit.losses import identity_distance, loss_chroma, loss_flip, loss_landmark, loss_photometric, loss_w_reg, perceptual_distance, weighted_sum
from facefit.optim import Adam
from facefit.reflectance import PyramidGenerator, ReflectanceMaps
from facefit.renderer import Rendering, render
from facefit.shape import PcaShapeModel, ShapeCoeffs, project_landmarks, reconstruct_shape, shape_regularizer
from facefit.tensor import Array, Tensor, backward

logger = logging.getLogger(__name__)


class Stage(StrEnum):
    """
    Progress of a fit.

    INITIALIZED: Parameters are set up, nothing optimized yet.
    INVERTED: Latent inversion finished, tuning may start.
    TUNED: Generator tuning finished.
    """

    INITIALIZED = "initialized"
    INVERTED = "inverted"
    TUNED = "tuned"


@dataclass(frozen=True, kw_only=True, eq=False)
class Models:
    shape: PcaShapeModel
    generator: PyramidGenerator
    bank: FilterBank


@dataclass(frozen=True, kw_only=True, eq=False)
class Target:
    """Linear RGB image with its 68 landmarks and the frozen bank features of the image."""

    image: Array
    landmarks: Array
    features: list[Array] = field(repr=False)

    @classmethod
    def prepare(cls, image: Array, landmarks: Array, bank: FilterBank) -> Self:
        if image.ndim != 3 or image.shape[2] != 3:  # noqa: PLR2004
            msg = f"target image must be HxWx3, got {image.shape}"
            raise ContractViolation(msg)
        features = [level.data for level in conv2d_fixed(to_chw(Tensor(image)), bank)]
        return cls(image=image, landmarks=landmarks, features=features)

    @property
    def embedding(self) -> Array:
        return self.features[-1].mean(axis=(1, 2))

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]

    @property
    def diagonal(self) -> float:
        return float(np.hypot(*self.size))


@dataclass(kw_only=True, eq=False)
class FitState:
    w: Array
    w_init: Array
    identity: Array
    expressions: list[Array]
    cameras: list[Camera]
    lightings: list[Lighting]
    offsets: Array
    albedo_init: Array | None = None
    stage: Stage = Stage.INITIALIZED
    loss_trace: list[dict[str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.cameras) != len(self.lightings):
            msg = f"{len(self.cameras)} cameras but {len(self.lightings)} lightings"
            raise ContractViolation(msg)
        if len(self.expressions) not in {1, len(self.cameras)}:
            msg = f"{len(self.expressions)} expression vectors for {len(self.cameras)} images"
            raise ContractViolation(msg)

    @property
    def image_count(self) -> int:
        return len(self.cameras)

    def expression(self, index: int) -> Array:
        return self.expressions[index if len(self.expressions) > 1 else 0]

    def coeffs(self, index: int) -> ShapeCoeffs:
        return ShapeCoeffs(identity=Tensor(self.identity), expression=Tensor(self.expression(index)))

    def copy(self) -> Self:
        return replace(
            self,
            w=self.w.copy(),
            w_init=self.w_init.copy(),
            identity=self.identity.copy(),
            expressions=[expression.copy() for expression in self.expressions],
            cameras=[camera.detached() for camera in self.cameras],
            lightings=[lighting.detached() for lighting in self.lightings],
            offsets=self.offsets.copy(),
            albedo_init=None if self.albedo_init is None else self.albedo_init.copy(),
            loss_trace=[dict(row) for row in self.loss_trace],
        )

    def save(self, path: str | Path) -> None:
        with ArrayContainer(path, CHECKPOINT_MAGIC, "w") as container:
            container.meta = {
                "stage": str(self.stage),
                "images": self.image_count,
                "expressions": len(self.expressions),
                "cameras": [
                    {"focal": camera.focal, "principal_point": list(camera.principal_point), "width": camera.width, "height": camera.height}
                    for camera in self.cameras
                ],
                "loss_trace": self.loss_trace,
            }
            container.add("w", self.w)
            container.add("w_init", self.w_init)
            container.add("identity", self.identity)
            container.add("offsets", self.offsets)
            if self.albedo_init is not None:
                container.add("albedo_init", self.albedo_init)
            for index, expression in enumerate(self.expressions):
                container.add(f"expression_{index}", expression)
            for index, (camera, lighting) in enumerate(zip(self.cameras, self.lightings, strict=True)):
                container.add(f"rotation_{index}", camera.rotation.data)
                container.add(f"translation_{index}", camera.translation.data)
                for name, tensor in lighting.named():
                    container.add(f"{name}_{index}", tensor.data)

    @classmethod
    def load(cls, path: str | Path) -> Self:
        container = ArrayContainer(path, CHECKPOINT_MAGIC)
        try:
            meta = container.meta
            cameras = [
                Camera(
                    rotation=Tensor(container.get(f"rotation_{index}")),
                    translation=Tensor(container.get(f"translation_{index}")),
                    focal=entry["focal"],
                    principal_point=tuple(entry["principal_point"]),
                    width=entry["width"],
                    height=entry["height"],
                )
                for index, entry in enumerate(meta["cameras"])
            ]
            lightings = [
                Lighting(**{name: Tensor(container.get(f"{name}_{index}")) for name in ("ambient", "directions", "intensities", "log_shininess")})
                for index in range(meta["images"])
            ]
            return cls(
                w=container.get("w"),
                w_init=container.get("w_init"),
                identity=container.get("identity"),
                expressions=[container.get(f"expression_{index}") for index in range(meta["expressions"])],
                cameras=cameras,
                lightings=lightings,
                offsets=container.get("offsets"),
                albedo_init=container.get("albedo_init") if "albedo_init" in container else None,
                stage=Stage(meta["stage"]),
                loss_trace=meta.get("loss_trace", []),
            )
        except (KeyError, TypeError, ValueError) as error:
            raise AssetIOError(path, f"malformed checkpoint: {error}") from error


def initial_pose(target: Target, model: PcaShapeModel, focal_ratio: float) -> Camera:
    """
    Similarity pose from the pose landmarks, lifted to a pinhole camera at depth focal / scale.

    A least-squares affine camera is fitted first and then projected to the nearest similarity: its 2x3 linear part is
    replaced by the closest orthonormal rows (from its SVD) times the mean singular value.
    """
    width, height = target.size
    image_points = target.landmarks[list(POSE_LANDMARKS)]
    object_points = model.mean[model.landmarks[list(POSE_LANDMARKS)]]
    spread = np.linalg.svd(image_points - image_points.mean(axis=0), compute_uv=False)
    if spread[-1] <= 1e-6 * max(float(spread[0]), EPSILON):
        msg = "pose initialization: the pose landmarks are collinear"
        raise DomainError(msg)
    design = np.c_[object_points, np.ones(len(object_points))]
    affine = np.linalg.lstsq(design, image_points, rcond=None)[0]
    rows = affine[:3].T
    u, singular, vt = np.linalg.svd(rows, full_matrices=False)
    if singular[-1] <= EPSILON:
        msg = "pose initialization: degenerate affine camera"
        raise DomainError(msg)
    orthonormal = u @ vt
    rotation = np.vstack([orthonormal, np.cross(orthonormal[0], orthonormal[1])])
    scale = float(singular.mean())
    focal = focal_ratio * width
    depth = focal / scale
    principal = (width / 2.0, height / 2.0)
    offset = affine[3]
    translation = np.array([(offset[0] - principal[0]) / scale, (offset[1] - principal[1]) / scale, depth])
    rotation_vector = cv2.Rodrigues(rotation)[0].reshape(3)
    return Camera(rotation=Tensor(rotation_vector), translation=Tensor(translation), focal=focal, principal_point=principal, width=width, height=height)


def headlight(camera: Camera, shininess: float) -> Lighting:
    """One white light shining from the camera towards the object, unit ambient gain."""
    direction = camera.center().data
    return Lighting.create(directions=[direction / np.linalg.norm(direction)], intensities=[[1.0, 1.0, 1.0]], ambient=1.0, shininess=shininess)


def initial_state(targets: Sequence[Target], models: Models, config: FitConfig, seed: int) -> FitState:
    rng = np.random.default_rng(seed)
    generator = models.generator
    mean_row = generator.sample_latents(rng, config.w_init_samples).mean(axis=0)
    w_init = np.tile(mean_row, (generator.depth, 1))
    cameras = [initial_pose(target, models.shape, config.focal_ratio) for target in targets]
    expressions = [np.zeros(models.shape.expression_dim) for _ in range(len(targets) if config.per_image_expression else 1)]
    return FitState(
        w=w_init.copy(),
        w_init=w_init,
        identity=np.zeros(models.shape.identity_dim),
        expressions=expressions,
        cameras=cameras,
        lightings=[headlight(camera, config.shininess_init) for camera in cameras],
        offsets=np.zeros((generator.depth, generator.latent_dim)),
    )


@dataclass(kw_only=True, eq=False)
class Parameters:
    """Tensors of one optimization stage; leaves created with requires_grad are the ones being optimized."""

    w: Tensor
    identity: Tensor
    expressions: list[Tensor]
    cameras: list[Camera]
    lightings: list[Lighting]
    offsets: Tensor

    @classmethod
    def for_inversion(cls, state: FitState, mode: LatentMode) -> Self:
        latent = Tensor(state.w[:1].copy() if mode == LatentMode.SHARED else state.w.copy(), requires_grad=True)
        return cls(
            w=latent,
            identity=Tensor(state.identity.copy(), requires_grad=True),
            expressions=[Tensor(expression.copy(), requires_grad=True) for expression in state.expressions],
            cameras=[camera.trainable() for camera in state.cameras],
            lightings=[lighting.trainable() for lighting in state.lightings],
            offsets=Tensor(state.offsets.copy()),
        )

    @classmethod
    def for_tuning(cls, state: FitState) -> Self:
        return cls(
            w=Tensor(state.w.copy()),
            identity=Tensor(state.identity.copy()),
            expressions=[Tensor(expression.copy()) for expression in state.expressions],
            cameras=[camera.detached() for camera in state.cameras],
            lightings=[lighting.detached() for lighting in state.lightings],
            offsets=Tensor(state.offsets.copy(), requires_grad=True),
        )

    @classmethod
    def frozen(cls, state: FitState) -> Self:
        return cls(
            w=Tensor(state.w),
            identity=Tensor(state.identity),
            expressions=[Tensor(expression) for expression in state.expressions],
            cameras=state.cameras,
            lightings=state.lightings,
            offsets=Tensor(state.offsets),
        )

    def latent(self, depth: int) -> Tensor:
        if self.w.shape[0] == depth:
            return self.w
        return self.w + np.zeros((depth, self.w.shape[1]))

    def expression(self, index: int) -> Tensor:
        return self.expressions[index if len(self.expressions) > 1 else 0]

    def named(self) -> dict[str, Tensor]:
        tensors: dict[str, Tensor] = {"w": self.w, "identity": self.identity, "offsets": self.offsets}
        tensors |= {f"expression_{index}": expression for index, expression in enumerate(self.expressions)}
        for index, (camera, lighting) in enumerate(zip(self.cameras, self.lightings, strict=True)):
            tensors |= {f"rotation_{index}": camera.rotation, f"translation_{index}": camera.translation}
            tensors |= {f"{name}_{index}": tensor for name, tensor in lighting.named()}
        return {name: tensor for name, tensor in tensors.items() if tensor.requires_grad}

    def view_scales(self) -> dict[str, float]:
        """
        Gradient scale N for every per-view parameter of an N-view batch.

        Image terms are averaged over the batch, so a view's own camera, lights and expression only see 1/N of
        their loss; scaling by N lets them follow that view's loss as in a single-view fit.
        """
        count = len(self.cameras)
        if count == 1:
            return {}
        per_view = [f"rotation_{index}" for index in range(count)] + [f"translation_{index}" for index in range(count)]
        per_view += [f"{name}_{index}" for index, lighting in enumerate(self.lightings) for name, _ in lighting.named()]
        if len(self.expressions) > 1:
            per_view += [f"expression_{index}" for index in range(len(self.expressions))]
        named = self.named()
        return {name: float(count) for name in per_view if name in named}

    def positions(self, model: PcaShapeModel, index: int) -> Tensor:
        return reconstruct_shape(model, ShapeCoeffs(identity=self.identity, expression=self.expression(index)))

    def maps(self, generator: PyramidGenerator) -> ReflectanceMaps:
        return generator.generate(self.latent(generator.depth), self.offsets)


def _batch_mean(values: list[Tensor]) -> Tensor:
    total = values[0]
    for value in values[1:]:
        total = total + value
    return total if len(values) == 1 else total * (1.0 / len(values))


def _renderer(params: Parameters, models: Models, config: FitConfig) -> tuple[Callable[[], ReflectanceMaps], Callable[[int], Rendering]]:
    maps = cache(lambda: params.maps(models.generator))

    @cache
    def rendering(index: int) -> Rendering:
        return render(params.positions(models.shape, index), models.shape, maps(), params.cameras[index], params.lightings[index], config.render_options())

    return maps, rendering


def total_inversion_loss(params: Parameters, targets: Sequence[Target], models: Models, config: FitConfig, w_init: Array) -> tuple[Tensor, dict[str, float]]:
    """Weighted inversion objective; image terms are averaged over the batch."""
    _, rendering = _renderer(params, models, config)
    indices = range(len(targets))

    @cache
    def features(index: int) -> list[Tensor]:
        return conv2d_fixed(to_chw(rendering(index).image), models.bank)

    def landmark() -> Tensor:
        return _batch_mean([
            loss_landmark(project_landmarks(params.positions(models.shape, i), models.shape.landmarks, params.cameras[i]), targets[i].landmarks, targets[i].diagonal)
            for i in indices
        ])

    terms = {
        "landmark": landmark,
        "photometric": lambda: _batch_mean([loss_photometric(targets[i].image, rendering(i).image, rendering(i).mask) for i in indices]),
        "identity": lambda: _batch_mean([identity_distance(targets[i].embedding, features(i)[-1].mean((1, 2))) for i in indices]),
        "perceptual": lambda: _batch_mean([perceptual_distance(targets[i].features, features(i)) for i in indices]),
        "latent_reg": lambda: loss_w_reg(params.latent(models.generator.depth), w_init),
        "shape_reg": lambda: shape_regularizer(params.identity, models.shape.identity_eigenvalues),
        "expression_reg": lambda: _batch_mean([shape_regularizer(expression, models.shape.expression_eigenvalues) for expression in params.expressions]),
    }
    return weighted_sum(terms, config.inversion_weights())


def total_tuning_loss(params: Parameters, targets: Sequence[Target], models: Models, config: FitConfig, albedo_init: Array) -> tuple[Tensor, dict[str, float]]:
    """Weighted tuning objective over the generator offsets."""
    maps, rendering = _renderer(params, models, config)
    indices = range(len(targets))
    terms = {
        "lpips": lambda: _batch_mean([perceptual_distance(targets[i].features, conv2d_fixed(to_chw(rendering(i).image), models.bank)) for i in indices]),
        "tune_photometric": lambda: _batch_mean([loss_photometric(targets[i].image, rendering(i).image, rendering(i).mask) for i in indices]),
        "flip": lambda: loss_flip(maps().diffuse),
        "chroma": lambda: loss_chroma(maps().diffuse, albedo_init),
    }
    return weighted_sum(terms, config.tuning_weights())


def _check_targets(targets: Sequence[Target]) -> None:
    if not targets:
        msg = "fitting needs at least one target"
        raise ContractViolation(msg)
    sizes = {target.image.shape for target in targets}
    if len(sizes) != 1:
        msg = f"targets have inconsistent resolutions: {sorted(sizes)}"
        raise ContractViolation(msg)


def _optimize(
    params: Parameters,
    objective: Callable[[Parameters], tuple[Tensor, dict[str, float]]],
    lr: float,
    iterations: int,
    stage: str,
    *,
    progress: bool,
) -> list[dict[str, float]]:
    optimizer = Adam(params=params.named(), lr=lr, scales=params.view_scales())
    trace: list[dict[str, float]] = []
    for iteration in tqdm(range(iterations), desc=stage, disable=not progress, leave=False):
        optimizer.zero_grad()
        total, components = objective(params)
        backward(total)
        optimizer.step()
        trace.append({"iter": float(iteration), **components, "total": total.item()})
        logger.debug("%s %d: %.6g", stage, iteration, total.item())
    return trace


def fit_inversion(targets: Sequence[Target], models: Models, config: FitConfig, seed: int = 0, *, state: FitState | None = None) -> FitState:
    """Optimize latent, shape, expression, cameras and lights against the targets; `state` overrides the default initialization."""
    _check_targets(targets)
    state = initial_state(targets, models, config, seed) if state is None else state.copy()
    if state.image_count != len(targets):
        msg = f"state describes {state.image_count} images but {len(targets)} targets were given"
        raise ContractViolation(msg)
    logger.info("Inversion: %d targets, %d iterations", len(targets), config.iters_inv)
    params = Parameters.for_inversion(state, config.latent_mode)
    w_init = state.w_init.copy()
    trace = _optimize(
        params,
        lambda p: total_inversion_loss(p, targets, models, config, w_init),
        config.lr_inv,
        config.iters_inv,
        "inversion",
        progress=config.progress,
    )
    result = replace(
        state,
        w=params.latent(models.generator.depth).data.copy(),
        identity=params.identity.data.copy(),
        expressions=[expression.data.copy() for expression in params.expressions],
        cameras=[camera.detached() for camera in params.cameras],
        lightings=[lighting.detached() for lighting in params.lightings],
        stage=Stage.INVERTED,
        loss_trace=state.loss_trace + [{"stage": 0.0, **row} for row in trace],
    )
    logger.info("Inversion finished, final loss %.6g", trace[-1]["total"] if trace else float("nan"))
    return result


def fit_tuning(state: FitState, targets: Sequence[Target], models: Models, config: FitConfig) -> FitState:
    """Optimize only the mid-band generator offsets with every inversion parameter frozen."""
    _check_targets(targets)
    if state.stage == Stage.TUNED:
        msg = "tuning already ran on this state, reset it first"
        raise ContractViolation(msg)
    if state.stage != Stage.INVERTED:
        msg = "tuning requires a completed inversion"
        raise ContractViolation(msg)
    frozen = Parameters.frozen(state)
    albedo_init = frozen.maps(models.generator).diffuse.data.copy()
    params = Parameters.for_tuning(state)
    logger.info("Tuning: %d iterations on levels %s", config.iters_tune, list(models.generator.tunable_levels))
    trace = _optimize(
        params,
        lambda p: total_tuning_loss(p, targets, models, config, albedo_init),
        config.lr_tune,
        config.iters_tune,
        "tuning",
        progress=config.progress,
    )
    return replace(
        state.copy(),
        offsets=params.offsets.data.copy(),
        albedo_init=albedo_init,
        stage=Stage.TUNED,
        loss_trace=state.loss_trace + [{"stage": 1.0, **row} for row in trace],
    )


def reset_tuning(state: FitState) -> FitState:
    if state.stage == Stage.INITIALIZED:
        msg = "nothing to reset before inversion"
        raise ContractViolation(msg)
    return replace(state.copy(), offsets=np.zeros_like(state.offsets), albedo_init=None, stage=Stage.INVERTED)


def fit(targets: Sequence[Target], models: Models, config: FitConfig, seed: int = 0) -> FitState:
    state = fit_inversion(targets, models, config, seed)
    if config.enable_tuning:
        state = fit_tuning(state, targets, models, config)
    return state


def fit_multi(targets: Sequence[Target], models: Models, config: FitConfig, seed: int = 0) -> FitState:
    """One latent and identity shared by N >= 2 views, with per-view cameras and lights."""
    if len(targets) < 2:  # noqa: PLR2004
        msg = f"multi-image fitting needs at least 2 targets, got {len(targets)}"
        raise ContractViolation(msg)
    _check_targets(targets)
    return fit(targets, models, config, seed)


def render_state(
    state: FitState,
    models: Models,
    config: FitConfig,
    index: int = 0,
    *,
    camera: Camera | None = None,
    lighting: Lighting | None = None,
) -> Rendering:
    params = Parameters.frozen(state)
    positions = params.positions(models.shape, index)
    return render(positions, models.shape, params.maps(models.generator), camera or state.cameras[index], lighting or state.lightings[index], config.render_options())


def state_maps(state: FitState, models: Models) -> ReflectanceMaps:
    return Parameters.frozen(state).maps(models.generator)


def interpolate_fit(a: FitState, b: FitState, t: float) -> FitState:
    """Blend latent, shape, expression and offsets; scene parameters come from `a`."""
    if not 0.0 <= t <= 1.0:
        msg = f"interpolation weight must be in [0, 1], got {t}"
        raise ContractViolation(msg)
    if (
        a.w.shape != b.w.shape
        or a.identity.shape != b.identity.shape
        or len(a.expressions) != len(b.expressions)
        or a.offsets.shape != b.offsets.shape
        or any(x.shape != y.shape for x, y in zip(a.expressions, b.expressions, strict=True))
    ):
        msg = "cannot interpolate structurally different fits"
        raise ContractViolation(msg)

    def blend(x: Array, y: Array) -> Array:
        return (1.0 - t) * x + t * y

    return replace(
        a.copy(),
        w=blend(a.w, b.w),
        identity=blend(a.identity, b.identity),
        expressions=[blend(x, y) for x, y in zip(a.expressions, b.expressions, strict=True)],
        offsets=blend(a.offsets, b.offsets),
    )


def write_loss_trace(path: str | Path, trace: Sequence[dict[str, float]]) -> None:
    columns = ["iter", "stage"]
    for row in trace:
        columns += [key for key in row if key not in columns and key != "total"]
    columns.append("total")
    try:
        with Path(path).open("w", newline="", encoding="utf-8") as file:
            writer = csv.DictWriter(file, fieldnames=columns, restval="")
            writer.writeheader()
            for row in trace:
                writer.writerow({key: int(value) if key in {"iter", "stage"} else repr(value) for key, value in row.items()})
    except OSError as error:
        raise AssetIOError(path, str(error)) from error
