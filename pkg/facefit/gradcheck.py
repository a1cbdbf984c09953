import logging
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np

from facefit.camera import Camera, Lighting
from facefit.config import FitConfig
from facefit.features import FilterBank
from facefit.fitting import Parameters, total_inversion_loss, total_tuning_loss
from facefit.losses import loss_chroma, loss_flip, loss_identity, loss_landmark, loss_perceptual, loss_photometric, loss_w_reg
from facefit.reflectance import ReflectanceMaps
from facefit.renderer import FragmentBuffer, render, shade_diffuse, shade_specular, tangent_to_object
from facefit.shape import project_landmarks, shape_regularizer, smooth_normals, vertex_normals
from facefit.synthetic import build_fixture, icosphere, synthetic_shape_model
from facefit.tensor import (
    Array,
    Tensor,
    backward,
    bilinear_sample,
    concat,
    conv2d,
    cross,
    elementwise,
    matmul,
    matvec,
    max_pool2,
    normalize3,
    numerical_gradient,
    reduce,
    resample,
    rodrigues,
    scatter_add,
    smooth_clamp,
    take,
)

logger = logging.getLogger(__name__)

TOLERANCE: float = 1e-4
STEP: float = 1e-6
SHAPES: tuple[tuple[int, ...], ...] = ((5,), (3, 4), (2, 3, 4))

type Builder = Callable[[list[Tensor]], Tensor]
type Item = tuple[str, Builder, list[Array]]


class Scope(StrEnum):
    """
    Groups of gradient checks.

    OPS: Every registered tape operation on three input shapes.
    SHADING: Mesh normals, landmark projection, shading terms and the texture-to-image path.
    LOSSES: Every loss term.
    FULL: Both stage objectives on a small synthetic fixture.
    """

    OPS = "ops"
    SHADING = "shading"
    LOSSES = "losses"
    FULL = "full"


@dataclass(frozen=True, kw_only=True)
class CheckResult:
    scope: Scope
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


def relative_error(analytic: Array, numeric: Array) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(build: Builder, inputs: Sequence[Array], *, seed: int = 0, step: float = STEP) -> float:
    """Worst relative error between the tape gradients of a random projection of `build` and central differences."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(value, dtype=np.float64) for value in inputs]
    probe: Array | None = None

    def scalar(tensors: list[Tensor]) -> Tensor:
        nonlocal probe
        out = build(tensors)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return (out * probe).sum()

    leaves = [Tensor(array.copy(), requires_grad=True) for array in arrays]
    backward(scalar(leaves))
    worst = 0.0
    for index, leaf in enumerate(leaves):

        def evaluate(value: Array, index: int = index) -> float:
            return scalar([Tensor(value if position == index else array) for position, array in enumerate(arrays)]).item()

        worst = max(worst, relative_error(leaf.grad, numerical_gradient(evaluate, arrays[index].copy(), step)))
    return worst


def _unit_rows(rng: np.random.Generator, count: int, bias: Sequence[float] = (0.0, 0.0, 2.0)) -> Array:
    rows = rng.standard_normal((count, 3)) * 0.4 + np.asarray(bias)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _lighting(t: list[Tensor]) -> Lighting:
    return Lighting(ambient=t[0], directions=t[1], intensities=t[2], log_shininess=t[3])


def _lighting_inputs(rng: np.random.Generator, lights: int = 2) -> list[Array]:
    return [np.asarray(0.4), _unit_rows(rng, lights, (0.2, 0.3, 1.0)), rng.uniform(0.2, 1.0, (lights, 3)), np.asarray(np.log(8.0))]


def op_items(rng: np.random.Generator) -> Iterator[Item]:
    for shape in SHAPES:
        label = "x".join(map(str, shape))
        a, b = rng.standard_normal(shape), rng.standard_normal(shape)
        positive = rng.uniform(0.5, 2.0, shape)
        for kind in ("add", "sub", "mul"):
            yield f"{kind} {label}", lambda t, kind=kind: elementwise(kind, t[0], t[1]), [a, b]
        yield f"div {label}", lambda t: elementwise("div", t[0], t[1]), [a, positive]
        yield f"pow {label}", lambda t: elementwise("pow", t[0], t[1]), [positive, b]
        yield f"pow_scalar {label}", lambda t: t[0] ** 2.5, [positive]
        for kind in ("max0", "exp", "abs", "sin", "cos", "softplus"):
            yield f"{kind} {label}", lambda t, kind=kind: elementwise(kind, t[0]), [a]
        for kind in ("log", "sqrt"):
            yield f"{kind} {label}", lambda t, kind=kind: elementwise(kind, t[0]), [positive]
        yield f"smooth_clamp {label}", lambda t: smooth_clamp(t[0], 0.0, 1.0, 0.3), [rng.uniform(-0.5, 1.5, shape)]
        yield f"sum {label}", lambda t: reduce("sum", t[0], -1), [a]
        yield f"mean {label}", lambda t: reduce("mean", t[0], 0, keepdims=True), [a]
        yield f"norm {label}", lambda t: t[0].norm(), [a]
        yield f"reshape {label}", lambda t: t[0].reshape(-1), [a]
        yield f"transpose {label}", lambda t: t[0].transpose(), [a]
        yield f"getitem {label}", lambda t: t[0][..., ::2], [a]
        yield f"broadcast add {label}", lambda t: t[0] + t[1], [a, rng.standard_normal(shape[-1:])]
    for rows, cols in ((3, 4), (5, 2), (1, 6)):
        yield f"matvec {rows}x{cols}", lambda t: matvec(t[0], t[1]), [rng.standard_normal((rows, cols)), rng.standard_normal(cols)]
        yield f"matmul {rows}x{cols}", lambda t: matmul(t[0], t[1]), [rng.standard_normal((rows, cols)), rng.standard_normal((cols, 3))]
    for count in (1, 4, 9):
        yield f"normalize3 {count}", lambda t: normalize3(t[0]), [rng.standard_normal((count, 3))]
        yield f"cross {count}", lambda t: cross(t[0], t[1]), [rng.standard_normal((count, 3)), rng.standard_normal((count, 3))]
        index = rng.integers(0, count, 2 * count)
        yield f"take {count}", lambda t, index=index: take(t[0], index), [rng.standard_normal((count, 3))]
        yield f"scatter_add {count}", lambda t, index=index: scatter_add(t[0], index, count), [rng.standard_normal((2 * count, 3))]
        yield f"concat {count}", lambda t: concat([t[0], t[1]], axis=1), [rng.standard_normal((count, 2)), rng.standard_normal((count, 3))]
    for scale in (0.3, 1.5, 3.0):
        yield f"rodrigues |r|={scale}", lambda t: rodrigues(t[0]), [scale * _unit_rows(rng, 1, (0.0, 0.0, 0.0))[0]]
    for channels, size in ((1, 4), (3, 5), (2, 8)):
        texture = rng.standard_normal((channels, size, size))
        uv = rng.uniform(0.05, 0.95, (6, 2))
        yield f"bilinear_sample {channels}x{size}", lambda t: bilinear_sample(t[0], t[1]), [texture, uv]
        filters = rng.standard_normal((2, channels, 3, 3))
        yield f"conv2d {channels}x{size}", lambda t, filters=filters: conv2d(t[0], filters), [texture]
        yield f"max_pool2 {channels}x{size}", lambda t: max_pool2(t[0]), [texture]
        up = rng.standard_normal((2 * size, size))
        yield f"resample {channels}x{size}", lambda t, up=up: resample(t[0], up, up), [texture]


def shading_items(rng: np.random.Generator) -> Iterator[Item]:
    positions, triangles = icosphere(1)
    yield "vertex_normals", lambda t: vertex_normals(t[0], triangles), [positions + 0.05 * rng.standard_normal(positions.shape)]
    yield "smooth_normals", lambda t: smooth_normals(t[0], triangles, 2), [positions + 0.2 * rng.standard_normal(positions.shape)]
    points = rng.uniform(-0.5, 0.5, (68, 3))

    def landmarks(t: list[Tensor]) -> Tensor:
        camera = Camera(rotation=t[1], translation=t[2], focal=60.0, principal_point=(32.0, 30.0), width=64, height=64)
        return project_landmarks(t[0], np.arange(68), camera)

    yield "project_landmarks", landmarks, [points, np.array([np.pi, 0.05, -0.1]), np.array([0.1, -0.2, 4.0])]
    fragments = 7
    yield (
        "shade_diffuse",
        lambda t: shade_diffuse(t[0], t[1], _lighting(t[2:])),
        [rng.uniform(0.1, 0.9, (fragments, 3)), _unit_rows(rng, fragments), *_lighting_inputs(rng)],
    )
    yield (
        "shade_specular",
        lambda t: shade_specular(t[0], t[1], t[2], _lighting(t[3:])),
        [rng.uniform(0.1, 0.9, (fragments, 1)), _unit_rows(rng, fragments), _unit_rows(rng, fragments, (-0.2, 0.1, 1.0)), *_lighting_inputs(rng)],
    )

    def frames(t: list[Tensor]) -> Tensor:
        buffer = FragmentBuffer(
            width=fragments,
            height=1,
            triangle_ids=np.zeros((1, fragments), dtype=np.intp),
            depth=np.ones((1, fragments)),
            barycentrics=np.full((fragments, 3), 1.0 / 3.0),
            uv=np.full((fragments, 2), 0.5),
            positions=Tensor(np.zeros((fragments, 3))),
            normals=normalize3(t[1]),
            diffuse_normals=normalize3(t[1]),
            tangents=t[2],
            bitangents=t[3],
        )
        return tangent_to_object(t[0], buffer)

    yield (
        "tangent_to_object",
        frames,
        [_unit_rows(rng, fragments), _unit_rows(rng, fragments), _unit_rows(rng, fragments, (2.0, 0.0, 0.0)), _unit_rows(rng, fragments, (0.0, 2.0, 0.0))],
    )
    model = synthetic_shape_model(int(rng.integers(2**31)), identity_dim=3, expression_dim=2)
    camera = Camera.frontal(32, 32, 4.0)
    lighting = Lighting.create(directions=[[0.3, 0.4, 1.0]], intensities=[[0.9, 0.9, 0.9]])
    specular = Tensor(rng.uniform(0.2, 0.5, (1, 4, 4)))
    normals = Tensor(np.broadcast_to(np.array([0.0, 0.0, 1.0])[:, None, None], (3, 4, 4)).copy())

    def textured(t: list[Tensor]) -> Tensor:
        return render(Tensor(model.mean), model, ReflectanceMaps(diffuse=t[0], specular=specular, normals=normals), camera, lighting).image

    yield "render diffuse texels", textured, [rng.uniform(0.1, 0.6, (3, 4, 4))]


def loss_items(rng: np.random.Generator) -> Iterator[Item]:
    target = rng.uniform(0.0, 100.0, (68, 2))
    yield "loss_landmark", lambda t: loss_landmark(t[0], target, 141.0), [target + rng.standard_normal((68, 2))]
    image = rng.uniform(0.1, 0.9, (8, 8, 3))
    mask = rng.uniform(size=(8, 8)) > 0.3
    yield "loss_photometric", lambda t: loss_photometric(image, t[0], mask), [image + 0.1 * rng.standard_normal(image.shape)]
    bank = FilterBank.seeded(int(rng.integers(2**31)), levels=2, filters=4, kernel=3)
    reference = rng.uniform(0.1, 0.9, (16, 16, 3))
    rendered = np.clip(reference + 0.2 * rng.standard_normal(reference.shape), 0.0, 1.0)
    yield "loss_identity", lambda t: loss_identity(reference, t[0], bank), [rendered]
    yield "loss_perceptual", lambda t: loss_perceptual(reference, t[0], bank), [rendered]
    w_init = rng.standard_normal((3, 4))
    yield "loss_w_reg", lambda t: loss_w_reg(t[0], w_init), [w_init + rng.standard_normal((3, 4))]
    yield "loss_flip", lambda t: loss_flip(t[0]), [rng.uniform(0.1, 0.9, (3, 6, 6))]
    albedo = rng.uniform(0.1, 0.9, (3, 6, 6))
    yield "loss_chroma", lambda t: loss_chroma(t[0], albedo), [albedo * rng.uniform(0.5, 1.5, albedo.shape)]
    eigenvalues = np.array([4.0, 2.0, 1.0, 0.5])
    yield "shape_regularizer", lambda t: shape_regularizer(t[0], eigenvalues), [rng.standard_normal(4)]


def full_items(rng: np.random.Generator) -> Iterator[Item]:
    config = FitConfig(progress=False)
    fixture = build_fixture(int(rng.integers(2**31)), image_size=48, resolution=16, levels=4, latent_dim=4, corpus_size=12, config=config)
    models, targets = fixture.models, fixture.targets()
    state = fixture.truth.copy()
    state.w = state.w + 0.3 * rng.standard_normal(state.w.shape)
    base = Parameters.frozen(state)
    lighting = state.lightings[0]

    def inversion(t: list[Tensor]) -> Tensor:
        params = replace(base, w=t[0], lightings=[_lighting(t[1:])])
        return total_inversion_loss(params, targets, models, config, fixture.truth.w)[0]

    yield "inversion objective (latent, lighting)", inversion, [state.w, *(tensor.data for _, tensor in lighting.named())]
    camera = state.cameras[0]
    geometry = config.model_copy(update={name: 0.0 for name in ("photometric", "identity", "perceptual", "latent_reg")})

    def landmarks(t: list[Tensor]) -> Tensor:
        params = replace(base, identity=t[0], expressions=[t[1]], cameras=[replace(camera, rotation=t[2], translation=t[3])])
        return total_inversion_loss(params, targets, models, geometry, fixture.truth.w)[0]

    identity = state.identity + 0.5 * rng.standard_normal(state.identity.shape)
    yield "inversion objective (shape, camera)", landmarks, [identity, state.expressions[0], camera.rotation.data, camera.translation.data + [0.05, -0.05, 0.1]]
    albedo_init = base.maps(models.generator).diffuse.data
    offsets = np.zeros_like(state.offsets)
    offsets[models.generator.tunable_levels] = 0.2 * rng.standard_normal((len(models.generator.tunable_levels), state.offsets.shape[1]))

    def tuning(t: list[Tensor]) -> Tensor:
        return total_tuning_loss(replace(base, offsets=t[0]), targets, models, config, albedo_init)[0]

    yield "tuning objective (offsets)", tuning, [offsets]


SCOPES: dict[Scope, Callable[[np.random.Generator], Iterator[Item]]] = {
    Scope.OPS: op_items,
    Scope.SHADING: shading_items,
    Scope.LOSSES: loss_items,
    Scope.FULL: full_items,
}


def run_gradcheck(scope: Scope | str, *, seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    scope = Scope(scope)
    rng = np.random.default_rng(seed)
    results = []
    for name, build, inputs in SCOPES[scope](rng):
        error = check_gradients(build, inputs, seed=seed)
        results.append(CheckResult(scope=scope, name=name, error=error, tolerance=tolerance))
        logger.debug("%s: %s relative error %.3g", scope, name, error)
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.warning("%d of %d %s gradient checks exceed %.0e: %s", len(failed), len(results), scope, tolerance, ", ".join(failed))
    return results
