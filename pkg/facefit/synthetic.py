"""Seeded procedural assets: a head-like PCA shape model, a reflectance corpus and rendered ground-truth targets."""

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from facefit.camera import Camera, Lighting
from facefit.config import FitConfig, PathsConfig, RunConfig
from facefit.constants import ALBEDO_MEAN, ALBEDO_STD, FOCAL_RATIO, LANDMARK_COUNT, MONK_SKIN_TONES, NORMAL_MEAN
from facefit.errors import AssetIOError
from facefit.features import FilterBank
from facefit.fitting import FitState, Models, Stage, Target, render_state
from facefit.imaging import hex_to_linear, save_image, save_landmarks
from facefit.reflectance import ReflectanceMaps, fit_generator, project
from facefit.shape import IndexArray, PcaShapeModel, project_landmarks, reconstruct_shape
from facefit.tensor import Array, Tensor

logger = logging.getLogger(__name__)

GOLDEN_RATIO: float = (1.0 + 5.0**0.5) / 2.0
HEAD_AXES: tuple[float, float, float] = (0.82, 1.0, 0.9)
FRONT_THRESHOLD: float = 0.35
CAMERA_DISTANCE: float = 4.0
VIEW_YAWS: tuple[float, ...] = (-30.0, 0.0, 30.0)
TRUTH_LIGHT: tuple[float, float, float] = (0.3, 0.4, 1.0)
TRUTH_COLOR: tuple[float, float, float] = (0.95, 0.9, 0.85)
CORPUS_SIZE: int = 80


def icosphere(subdivisions: int = 3) -> tuple[Array, IndexArray]:
    """Unit icosphere with outward-facing counter-clockwise triangles."""
    t = GOLDEN_RATIO
    vertices = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]  # fmt: skip
    points = [np.asarray(vertex, dtype=np.float64) / np.linalg.norm(vertex) for vertex in vertices]
    for _ in range(subdivisions):
        midpoints: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                middle = points[a] + points[b]
                points.append(middle / np.linalg.norm(middle))
                midpoints[key] = len(points) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = refined
    positions = np.array(points)
    triangles = np.array(faces, dtype=np.intp)
    a, b, c = (positions[triangles[:, corner]] for corner in range(3))
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0.0
    triangles[inward] = triangles[inward][:, ::-1]
    return positions, triangles


def spherical_uv(directions: Array) -> Array:
    """Longitude/latitude UVs with the seam behind the head and v growing downwards."""
    u = 0.5 + np.arctan2(directions[:, 0], directions[:, 2]) / (2.0 * np.pi)
    v = 0.5 - np.arcsin(np.clip(directions[:, 1], -1.0, 1.0)) / np.pi
    return np.stack([u, v], axis=1)


def farthest_points(points: Array, count: int, start: int) -> IndexArray:
    chosen = [start]
    distance = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        chosen.append(int(np.argmax(distance)))
        distance = np.minimum(distance, np.linalg.norm(points - points[chosen[-1]], axis=1))
    return np.array(chosen, dtype=np.intp)


def _monomials(points: Array) -> Array:
    x, y, z = points.T
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, z * x], axis=1)


def _smooth_basis(rng: np.random.Generator, points: Array, count: int, weight: Array) -> Array:
    features = _monomials(points) * weight[:, None]
    columns = [(features @ rng.standard_normal((features.shape[1], 3))).reshape(-1) for _ in range(count)]
    basis, _ = np.linalg.qr(np.stack(columns, axis=1))
    return basis


def synthetic_shape_model(seed: int, *, subdivisions: int = 3, identity_dim: int = 10, expression_dim: int = 5) -> PcaShapeModel:
    """Deformed icosphere with smooth random identity bases, lower-face expression bases and spread frontal landmarks."""
    rng = np.random.default_rng(seed)
    directions, triangles = icosphere(subdivisions)
    nose = np.exp(-(directions[:, 0] ** 2 + (directions[:, 1] + 0.05) ** 2) / 0.02) * (directions[:, 2] > 0.0)
    mean = directions * HEAD_AXES
    mean[:, 2] += 0.15 * nose
    lower_face = np.clip(directions[:, 2], 0.0, None) * np.clip(0.3 - directions[:, 1], 0.0, 1.0)
    front = np.flatnonzero(directions[:, 2] > FRONT_THRESHOLD)
    landmarks = front[farthest_points(directions[front], LANDMARK_COUNT, int(np.argmax(directions[front, 2])))]
    model = PcaShapeModel(
        mean=mean,
        identity_basis=_smooth_basis(rng, directions, identity_dim, np.ones(len(directions))),
        expression_basis=_smooth_basis(rng, directions, expression_dim, lower_face),
        identity_eigenvalues=(3.0 * 0.8 ** np.arange(identity_dim)) ** 2,
        expression_eigenvalues=(2.0 * 0.75 ** np.arange(expression_dim)) ** 2,
        triangles=triangles,
        uv=spherical_uv(directions),
        landmarks=landmarks,
    )
    logger.info("Built a synthetic shape model with %d vertices and %d triangles", model.vertex_count, len(triangles))
    return model


def smooth_noise(rng: np.random.Generator, resolution: int, sigma: float) -> Array:
    field = cv2.GaussianBlur(rng.standard_normal((resolution, resolution)), (0, 0), sigmaX=sigma, borderType=cv2.BORDER_REFLECT)
    return (field - field.mean()) / max(float(field.std()), 1e-12)


def _blob(resolution: int, center: tuple[float, float], radii: tuple[float, float]) -> Array:
    texels = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(texels, texels)
    return np.exp(-(((u - center[0]) / radii[0]) ** 2 + ((v - center[1]) / radii[1]) ** 2))


def _raw_face(rng: np.random.Generator, resolution: int) -> tuple[Array, Array, Array]:
    base = hex_to_linear(MONK_SKIN_TONES[int(rng.integers(len(MONK_SKIN_TONES)))]) * rng.uniform(0.85, 1.15)
    tone = 1.0 + 0.15 * smooth_noise(rng, resolution, resolution / 8.0)
    freckles = 1.0 - 0.3 * (smooth_noise(rng, resolution, 0.7) > 2.0)
    diffuse = base[:, None, None] * tone * freckles
    brows = _blob(resolution, (0.45, 0.32), (0.04, 0.012)) + _blob(resolution, (0.55, 0.32), (0.04, 0.012))
    diffuse *= 1.0 - 0.85 * np.clip(brows, 0.0, 1.0)
    lips = _blob(resolution, (0.5, 0.62), (0.05, 0.015))
    diffuse *= 1.0 + lips * np.array([0.15, -0.4, -0.3])[:, None, None]
    shine = _blob(resolution, (0.5, 0.22), (0.08, 0.06)) + _blob(resolution, (0.5, 0.48), (0.03, 0.06))
    specular = np.clip(0.3 + 0.08 * smooth_noise(rng, resolution, resolution / 16.0) + 0.25 * shine, 0.0, 1.0)[None]
    height = smooth_noise(rng, resolution, 1.0) + 0.5 * smooth_noise(rng, resolution, 3.0)
    return diffuse, specular, height


def _detail_normals(height: Array, strength: float) -> Array:
    dv, du = np.gradient(height)
    normals = np.stack([-strength * du, -strength * dv, np.ones_like(height)])
    return normals / np.linalg.norm(normals, axis=0, keepdims=True)


def _calibrate_strength(heights: list[Array], target: float = NORMAL_MEAN) -> float:
    """Bump strength at which the mean encoded normal of the corpus hits `target`."""
    low, high = 0.0, 64.0
    for _ in range(40):
        middle = (low + high) / 2.0
        encoded = np.mean([((_detail_normals(height, middle) + 1.0) / 2.0).mean() for height in heights])
        low, high = (middle, high) if encoded > target else (low, middle)
    return (low + high) / 2.0


def reflectance_corpus(count: int, resolution: int, seed: int) -> list[ReflectanceMaps]:
    """Procedural faces with corpus-wide albedo and encoded-normal statistics pinned to the published means."""
    rng = np.random.default_rng(seed)
    faces = [_raw_face(rng, resolution) for _ in range(count)]
    diffuse = np.stack([face[0] for face in faces])
    diffuse = np.clip(ALBEDO_MEAN + ALBEDO_STD * (diffuse - diffuse.mean()) / diffuse.std(), 0.005, 0.995)
    strength = _calibrate_strength([face[2] for face in faces])
    logger.debug("Detail normal strength calibrated to %.4g", strength)
    return [
        ReflectanceMaps(diffuse=Tensor(albedo), specular=Tensor(specular), normals=Tensor(_detail_normals(height, strength)))
        for albedo, (_, specular, height) in zip(diffuse, faces, strict=True)
    ]


def yaw_camera(yaw_degrees: float, width: int, height: int, *, distance: float = CAMERA_DISTANCE, focal_ratio: float = FOCAL_RATIO) -> Camera:
    return Camera.frontal(width, height, distance, focal_ratio=focal_ratio).turned(yaw_degrees)


@dataclass(kw_only=True, eq=False)
class Fixture:
    models: Models
    truth: FitState
    images: list[Array]
    landmarks: list[Array]

    def targets(self) -> list[Target]:
        return [Target.prepare(image, points, self.models.bank) for image, points in zip(self.images, self.landmarks, strict=True)]


def build_fixture(
    seed: int,
    *,
    views: int = 1,
    image_size: int = 128,
    resolution: int = 128,
    levels: int = 8,
    latent_dim: int = 64,
    corpus_size: int = CORPUS_SIZE,
    config: FitConfig | None = None,
) -> Fixture:
    """Shape model, generator and ground-truth fit rendered into `views` targets (frontal, or the three yaw views)."""
    config = config or FitConfig()
    rng = np.random.default_rng(seed)
    shape = synthetic_shape_model(seed)
    corpus = reflectance_corpus(corpus_size + 1, resolution, seed)
    generator = fit_generator(corpus[:corpus_size], levels=levels, latent_dim=latent_dim)
    models = Models(shape=shape, generator=generator, bank=FilterBank.seeded(config.bank_seed))
    w = project(generator, corpus[-1]).data
    yaws = (0.0,) if views == 1 else VIEW_YAWS[:views]
    cameras = [yaw_camera(yaw, image_size, image_size, focal_ratio=config.focal_ratio) for yaw in yaws]
    lightings = [
        Lighting.create(directions=[TRUTH_LIGHT], intensities=[TRUTH_COLOR], ambient=1.0, shininess=config.shininess_init) for _ in cameras
    ]
    truth = FitState(
        w=w,
        w_init=w.copy(),
        identity=0.8 * rng.standard_normal(shape.identity_dim) * np.sqrt(shape.identity_eigenvalues),
        expressions=[0.5 * rng.standard_normal(shape.expression_dim) * np.sqrt(shape.expression_eigenvalues)],
        cameras=cameras,
        lightings=lightings,
        offsets=np.zeros((generator.depth, generator.latent_dim)),
        stage=Stage.INVERTED,
    )
    images = [render_state(truth, models, config, index).image.data for index in range(len(cameras))]
    landmarks = [
        project_landmarks(reconstruct_shape(shape, truth.coeffs(index)), shape.landmarks, camera).data for index, camera in enumerate(cameras)
    ]
    logger.info("Built a %d-view synthetic fixture at %dx%d", len(cameras), image_size, image_size)
    return Fixture(models=models, truth=truth, images=images, landmarks=landmarks)


def save_fixture(fixture: Fixture, directory: str | Path, *, seed: int, config: FitConfig | None = None) -> RunConfig:
    """Write the fixture assets plus a run configuration pointing at them; returns that configuration."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise AssetIOError(directory, str(error)) from error
    fixture.models.shape.save(directory / "shape_model.fmsm")
    fixture.models.generator.save(directory / "generator.fmgn")
    fixture.truth.save(directory / "truth.fmfs")
    targets, landmarks = [], []
    for index, (image, points) in enumerate(zip(fixture.images, fixture.landmarks, strict=True)):
        targets.append(directory / f"target_{index}.png")
        landmarks.append(directory / f"landmarks_{index}.txt")
        save_image(targets[-1], image, bit_depth=16)
        save_landmarks(landmarks[-1], points)
    run = RunConfig(
        paths=PathsConfig(shape_model=directory / "shape_model.fmsm", generator=directory / "generator.fmgn", targets=targets, landmarks=landmarks, output_dir=directory / "fit"),
        fit=config or FitConfig(),
        seed=seed,
    )
    try:
        (directory / "config.json").write_text(run.model_dump_json(indent=2), encoding="utf-8")
    except OSError as error:
        raise AssetIOError(directory / "config.json", str(error)) from error
    return run
