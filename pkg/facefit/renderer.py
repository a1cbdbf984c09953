import logging
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from facefit.camera import Camera, Lighting
from facefit.constants import BACKGROUND, DIFFUSE_SMOOTHING, EPSILON, NEAR_PLANE
from facefit.reflectance import ReflectanceMaps
from facefit.shape import IndexArray, PcaShapeModel, smooth_normals, vertex_normals
from facefit.tensor import Array, Tensor, bilinear_sample, matmul, normalize3, scatter_add, smooth_clamp, take

logger = logging.getLogger(__name__)


class Shading(StrEnum):
    """
    Shading model.

    BLINN_PHONG: Diffuse term on smoothed normals plus Blinn-Phong specular on detail normals.
    LAMBERT: Diffuse term only, on the geometric normals.
    """

    BLINN_PHONG = "blinn_phong"
    LAMBERT = "lambert"


@dataclass(frozen=True, kw_only=True)
class RenderOptions:
    background: tuple[float, float, float] = BACKGROUND
    smoothing: int = DIFFUSE_SMOOTHING
    clamp_diffuse: bool = True
    shading: Shading = Shading.BLINN_PHONG


@dataclass(kw_only=True, eq=False)
class FragmentBuffer:
    """
    Rasterization result.

    Pixel assignment, barycentrics, depth and uv are plain arrays (no gradient through coverage); the
    interpolated attributes are tensors on the tape. Per-fragment arrays follow the order of `pixels`.
    """

    width: int
    height: int
    triangle_ids: NDArray[np.intp]
    depth: Array
    pixels: NDArray[np.intp] = field(init=False)
    barycentrics: Array
    uv: Array
    positions: Tensor
    normals: Tensor
    diffuse_normals: Tensor
    tangents: Tensor
    bitangents: Tensor

    def __post_init__(self) -> None:
        self.pixels = np.flatnonzero(self.triangle_ids.reshape(-1) >= 0)

    @property
    def mask(self) -> NDArray[np.bool_]:
        return self.triangle_ids >= 0

    @property
    def count(self) -> int:
        return int(self.pixels.size)


@dataclass(kw_only=True, eq=False)
class Rendering:
    image: Tensor
    linear: Tensor
    diffuse: Tensor
    specular: Tensor
    fragments: FragmentBuffer

    @property
    def mask(self) -> NDArray[np.bool_]:
        return self.fragments.mask


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum(-1, keepdims=True)


def interpolate(attribute: Tensor, corners: NDArray[np.intp], barycentrics: Array) -> Tensor:
    total: Tensor | None = None
    for corner in range(3):
        term = take(attribute, corners[:, corner]) * barycentrics[:, corner : corner + 1]
        total = term if total is None else total + term
    return total  # type: ignore[return-value]


def _scan(screen: Array, depth: Array, triangles: IndexArray, width: int, height: int) -> tuple[NDArray[np.intp], Array, Array]:
    """Z-buffered coverage at pixel centres with perspective-correct barycentrics."""
    zbuffer = np.full((height, width), np.inf)
    ids = np.full((height, width), -1, dtype=np.intp)
    weights = np.zeros((height, width, 3))
    for index, corners in enumerate(triangles):
        z = depth[corners]
        if np.any(z <= NEAR_PLANE):
            continue
        (x0, y0), (x1, y1), (x2, y2) = screen[corners]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < EPSILON:
            continue
        left = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        right = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        top = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        bottom = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        if left > right or top > bottom:
            continue
        px, py = np.meshgrid(np.arange(left, right + 1) + 0.5, np.arange(top, bottom + 1) + 0.5)
        b0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        b1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0.0) & (b1 >= 0.0) & (b2 >= 0.0)
        if not inside.any():
            continue
        corrected = np.stack([b0 / z[0], b1 / z[1], b2 / z[2]], axis=-1)
        inverse_depth = corrected.sum(axis=-1)
        fragment_depth = 1.0 / inverse_depth
        window = (slice(top, bottom + 1), slice(left, right + 1))
        closer = inside & (fragment_depth < zbuffer[window])
        zbuffer[window] = np.where(closer, fragment_depth, zbuffer[window])
        ids[window] = np.where(closer, index, ids[window])
        weights[window] = np.where(closer[..., None], corrected / inverse_depth[..., None], weights[window])
    return ids, zbuffer, weights


def _tangent_frames(positions: Tensor, triangles: IndexArray, uv: Array) -> tuple[Tensor, Tensor, NDArray[np.bool_]]:
    a, b, c = (take(positions, triangles[:, corner]) for corner in range(3))
    duv1 = uv[triangles[:, 1]] - uv[triangles[:, 0]]
    duv2 = uv[triangles[:, 2]] - uv[triangles[:, 0]]
    determinant = duv1[:, 0] * duv2[:, 1] - duv2[:, 0] * duv1[:, 1]
    degenerate = np.abs(determinant) < EPSILON
    scale = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, determinant))[:, None]
    e1, e2 = b - a, c - a
    tangents = (e1 * duv2[:, 1:2] - e2 * duv1[:, 1:2]) * scale
    bitangents = (e2 * duv1[:, 0:1] - e1 * duv2[:, 0:1]) * scale
    return tangents, bitangents, degenerate


def rasterize(positions: Tensor, triangles: IndexArray, uv: Array, normals: Tensor, diffuse_normals: Tensor, camera: Camera) -> FragmentBuffer:
    width, height = camera.width, camera.height
    camera_points = camera.to_camera(positions).data
    depth = camera_points[:, 2]
    safe = np.where(depth > NEAR_PLANE, depth, 1.0)
    screen = np.stack(
        [camera.focal * camera_points[:, 0] / safe + camera.principal_point[0], camera.focal * camera_points[:, 1] / safe + camera.principal_point[1]],
        axis=1,
    )
    ids, zbuffer, weights = _scan(screen, depth, triangles, width, height)
    covered = ids >= 0
    if not covered.any():
        logger.warning("Mesh is entirely off-screen for a %dx%d camera", width, height)
    fragment_ids = ids[covered]
    corners = triangles[fragment_ids]
    barycentrics = weights[covered]
    tangents, bitangents, degenerate = _tangent_frames(positions, triangles, uv)
    fragment_tangents = take(tangents, fragment_ids)
    fragment_bitangents = take(bitangents, fragment_ids)
    fragment_normals = normalize3(interpolate(normals, corners, barycentrics))
    fallback = degenerate[fragment_ids]
    if fallback.any():
        logger.warning("%d fragments lie on triangles with degenerate UVs, using an arbitrary tangent frame", int(fallback.sum()))
        n = fragment_normals.data[fallback]
        axes = np.where((np.abs(n[:, 0]) < 0.9)[:, None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])  # noqa: PLR2004
        extra_t = np.zeros((fragment_ids.size, 3))
        extra_b = np.zeros((fragment_ids.size, 3))
        extra_t[fallback] = axes
        extra_b[fallback] = np.cross(n, axes)
        fragment_tangents += extra_t
        fragment_bitangents += extra_b
    return FragmentBuffer(
        width=width,
        height=height,
        triangle_ids=ids,
        depth=zbuffer,
        barycentrics=barycentrics,
        uv=interpolate(Tensor(uv), corners, barycentrics).data,
        positions=interpolate(positions, corners, barycentrics),
        normals=fragment_normals,
        diffuse_normals=normalize3(interpolate(diffuse_normals, corners, barycentrics)),
        tangents=fragment_tangents,
        bitangents=fragment_bitangents,
    )


def shade_diffuse(albedo: Tensor, normals: Tensor, lighting: Lighting, *, clamp: bool = True) -> Tensor:
    """U_D = c_a * A_D * sum_j max(0, N_D . l_j) c_j, one row per fragment."""
    cosines = matmul(normals, lighting.unit_directions().transpose())
    if clamp:
        cosines = cosines.max0()
    return albedo * matmul(cosines, lighting.colors()) * lighting.ambient_gain()


def shade_specular(specular: Tensor, normals: Tensor, view: Tensor, lighting: Lighting) -> Tensor:
    """U_S = A_S * sum_j max(0, N . h_j)^s c_j with h_j the normalized half-vector of l_j and v."""
    fragments = normals.shape[0]
    halfway = normalize3(view.reshape(fragments, 1, 3) + lighting.unit_directions())
    alignment = (normals.reshape(fragments, 1, 3) * halfway).sum(-1).max0()
    return specular * matmul(alignment ** lighting.shininess(), lighting.colors())


def tangent_to_object(detail: Tensor, fragments: FragmentBuffer) -> Tensor:
    """Rotate tangent-space detail normals into object space using Gram-Schmidt orthonormalized fragment frames."""
    normal = fragments.normals
    tangent = normalize3(fragments.tangents - normal * _dot(normal, fragments.tangents))
    bitangent = normalize3(fragments.bitangents - normal * _dot(normal, fragments.bitangents) - tangent * _dot(tangent, fragments.bitangents))
    return normalize3(tangent * detail[:, 0:1] + bitangent * detail[:, 1:2] + normal * detail[:, 2:3])


def view_directions(fragments: FragmentBuffer, camera: Camera) -> Tensor:
    return normalize3(camera.center() - fragments.positions)


def render(positions: Tensor, model: PcaShapeModel, maps: ReflectanceMaps, camera: Camera, lighting: Lighting, options: RenderOptions | None = None) -> Rendering:
    options = options or RenderOptions()
    normals = vertex_normals(positions, model.triangles)
    if options.shading == Shading.LAMBERT:
        diffuse_normals = normals
    else:
        diffuse_normals = smooth_normals(normals, model.triangles, options.smoothing, model.adjacency)
    fragments = rasterize(positions, model.triangles, model.uv, normals, diffuse_normals, camera)
    pixel_count = camera.width * camera.height
    background = np.tile(np.asarray(options.background, dtype=np.float64), (pixel_count, 1))
    background[fragments.pixels] = 0.0
    if fragments.count == 0:
        empty = Tensor(np.zeros((0, 3)))
        return Rendering(image=Tensor(background.reshape(camera.height, camera.width, 3)), linear=empty, diffuse=empty, specular=empty, fragments=fragments)
    uv = Tensor(fragments.uv)
    diffuse = shade_diffuse(bilinear_sample(maps.diffuse, uv), fragments.diffuse_normals, lighting, clamp=options.clamp_diffuse)
    if options.shading == Shading.LAMBERT:
        specular = Tensor(np.zeros((fragments.count, 3)))
    else:
        detail = tangent_to_object(bilinear_sample(maps.normals, uv), fragments)
        specular = shade_specular(bilinear_sample(maps.specular, uv), detail, view_directions(fragments, camera), lighting)
    linear = diffuse + specular
    # lower knee sits below zero so only the upper ramp acts on clamped light
    toned = smooth_clamp(linear.max0(), -1.0, 1.0)
    image = scatter_add(toned, fragments.pixels, pixel_count) + background
    return Rendering(image=image.reshape(camera.height, camera.width, 3), linear=linear, diffuse=diffuse, specular=specular, fragments=fragments)
