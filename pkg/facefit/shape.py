import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Self

import numpy as np
from numpy.typing import NDArray

from facefit.camera import Camera
from facefit.constants import LANDMARK_COUNT, NEAR_PLANE, SHAPE_MAGIC
from facefit.container import ArrayContainer
from facefit.errors import AssetIOError, ContractViolation, DomainError
from facefit.tensor import Array, Tensor, concat, cross, matvec, normalize3, scatter_add, take

logger = logging.getLogger(__name__)

type IndexArray = NDArray[np.intp]

BASIS_NORM_TOLERANCE: float = 1e-6


@dataclass(frozen=True, kw_only=True, eq=False)
class PcaShapeModel:
    mean: Array
    identity_basis: Array
    expression_basis: Array
    identity_eigenvalues: Array
    expression_eigenvalues: Array
    triangles: IndexArray
    uv: Array
    landmarks: IndexArray
    adjacency: tuple[IndexArray, IndexArray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        vertices = self.mean.shape[0]
        if self.mean.shape != (vertices, 3) or self.uv.shape != (vertices, 2):
            msg = f"mean {self.mean.shape} and uv {self.uv.shape} must be Vx3 and Vx2"
            raise ContractViolation(msg)
        for name, basis, eigenvalues in (
            ("identity", self.identity_basis, self.identity_eigenvalues),
            ("expression", self.expression_basis, self.expression_eigenvalues),
        ):
            if basis.ndim != 2 or basis.shape[0] != 3 * vertices or basis.shape[1] != eigenvalues.shape[0]:
                msg = f"{name} basis {basis.shape} does not match {vertices} vertices and {eigenvalues.shape[0]} eigenvalues"
                raise ContractViolation(msg)
            if np.any(eigenvalues <= 0.0):
                msg = f"{name} eigenvalues must be strictly positive"
                raise ContractViolation(msg)
            if np.any(np.diff(eigenvalues) > 0.0):
                msg = f"{name} eigenvalues must be non-increasing"
                raise ContractViolation(msg)
            if basis.size and np.max(np.abs(np.linalg.norm(basis, axis=0) - 1.0)) > BASIS_NORM_TOLERANCE:
                msg = f"{name} basis columns must have unit norm"
                raise ContractViolation(msg)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3 or np.any(self.triangles < 0) or np.any(self.triangles >= vertices):
            msg = f"triangles must be Tx3 indices below {vertices}"
            raise ContractViolation(msg)
        if self.landmarks.shape != (LANDMARK_COUNT,) or np.any(self.landmarks < 0) or np.any(self.landmarks >= vertices):
            msg = f"expected {LANDMARK_COUNT} landmark indices below {vertices}"
            raise ContractViolation(msg)
        object.__setattr__(self, "adjacency", one_ring(self.triangles, vertices))

    @property
    def vertex_count(self) -> int:
        return self.mean.shape[0]

    @property
    def identity_dim(self) -> int:
        return self.identity_eigenvalues.shape[0]

    @property
    def expression_dim(self) -> int:
        return self.expression_eigenvalues.shape[0]

    def save(self, path: str | Path) -> None:
        with ArrayContainer(path, SHAPE_MAGIC, "w") as container:
            container.meta = {"vertices": self.vertex_count, "identity": self.identity_dim, "expression": self.expression_dim}
            container.add("mean", self.mean)
            container.add("identity_basis", self.identity_basis)
            container.add("identity_eigenvalues", self.identity_eigenvalues)
            container.add("expression_basis", self.expression_basis)
            container.add("expression_eigenvalues", self.expression_eigenvalues)
            container.add("triangles", self.triangles)
            container.add("uv", self.uv)
            container.add("landmarks", self.landmarks)

    @classmethod
    def load(cls, path: str | Path) -> Self:
        container = ArrayContainer(path, SHAPE_MAGIC)
        try:
            model = cls(
                mean=container.get("mean"),
                identity_basis=container.get("identity_basis"),
                expression_basis=container.get("expression_basis"),
                identity_eigenvalues=container.get("identity_eigenvalues"),
                expression_eigenvalues=container.get("expression_eigenvalues"),
                triangles=container.get("triangles").astype(np.intp),
                uv=container.get("uv"),
                landmarks=container.get("landmarks").astype(np.intp),
            )
        except ContractViolation as error:
            raise AssetIOError(path, str(error)) from error
        logger.info("Loaded shape model %s: %d vertices, %d identity and %d expression components", path, model.vertex_count, model.identity_dim, model.expression_dim)
        return model


@dataclass(kw_only=True)
class ShapeCoeffs:
    identity: Tensor
    expression: Tensor

    @classmethod
    def zeros(cls, model: PcaShapeModel) -> Self:
        return cls(identity=Tensor(np.zeros(model.identity_dim)), expression=Tensor(np.zeros(model.expression_dim)))

    def trainable(self) -> Self:
        return type(self)(identity=Tensor(self.identity.data.copy(), requires_grad=True), expression=Tensor(self.expression.data.copy(), requires_grad=True))


def one_ring(triangles: IndexArray, vertices: int) -> tuple[IndexArray, IndexArray]:
    """Sorted unique (source, target) pairs of mesh edges in both directions plus self loops."""
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    loops = np.repeat(np.arange(vertices, dtype=np.intp)[:, None], 2, axis=1)
    pairs = np.unique(np.concatenate([edges, edges[:, ::-1], loops]), axis=0)
    return pairs[:, 0].astype(np.intp), pairs[:, 1].astype(np.intp)


def reconstruct_shape(model: PcaShapeModel, coeffs: ShapeCoeffs) -> Tensor:
    if coeffs.identity.shape != (model.identity_dim,) or coeffs.expression.shape != (model.expression_dim,):
        msg = (
            f"coefficients of length {coeffs.identity.shape} and {coeffs.expression.shape} "
            f"do not match bases of size {model.identity_dim} and {model.expression_dim}"
        )
        raise ContractViolation(msg)
    offsets = matvec(Tensor(model.identity_basis), coeffs.identity) + matvec(Tensor(model.expression_basis), coeffs.expression)
    return offsets.reshape(model.vertex_count, 3) + model.mean


def vertex_normals(positions: Tensor, triangles: IndexArray) -> Tensor:
    vertices = positions.shape[0]
    a, b, c = (take(positions, triangles[:, corner]) for corner in range(3))
    # cross product length is twice the triangle area
    faces = cross(b - a, c - a)
    summed = scatter_add(concat([faces, faces, faces]), np.concatenate([triangles[:, 0], triangles[:, 1], triangles[:, 2]]), vertices)
    isolated = np.setdiff1d(np.arange(vertices), triangles.reshape(-1))
    if isolated.size:
        logger.warning("%d vertices belong to no triangle, their normals default to +Z", isolated.size)
        fallback = np.zeros((vertices, 3))
        fallback[isolated, 2] = 1.0
        summed += fallback
    try:
        return normalize3(summed)
    except DomainError as error:
        msg = "vertex normals: a vertex has only degenerate triangles"
        raise DomainError(msg) from error


def smooth_normals(normals: Tensor, triangles: IndexArray, iterations: int, adjacency: tuple[IndexArray, IndexArray] | None = None) -> Tensor:
    if iterations < 0:
        msg = f"smoothing iterations must be nonnegative, got {iterations}"
        raise ContractViolation(msg)
    sources, targets = adjacency if adjacency is not None else one_ring(triangles, normals.shape[0])
    smoothed = normals
    for _ in range(iterations):
        smoothed = normalize3(scatter_add(take(smoothed, sources), targets, normals.shape[0]))
    return smoothed


def project_landmarks(positions: Tensor, landmarks: IndexArray, camera: Camera) -> Tensor:
    points = take(positions, landmarks)
    depth = camera.to_camera(points).data[:, 2]
    behind = np.flatnonzero(depth <= NEAR_PLANE)
    if behind.size:
        msg = f"landmark {int(behind[0])} (vertex {int(landmarks[behind[0]])}) lies behind the camera"
        raise DomainError(msg)
    return camera.project(points)


def shape_regularizer(coeffs: Tensor, eigenvalues: Array) -> Tensor:
    if np.any(eigenvalues <= 0.0):
        msg = "shape regularizer needs strictly positive eigenvalues"
        raise ContractViolation(msg)
    return (coeffs * coeffs / eigenvalues).sum()


def export_obj(path: str | Path, positions: Array, uv: Array, normals: Array, triangles: IndexArray) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in positions]
    # OBJ texture space has v pointing up
    lines += [f"vt {u:.6f} {1.0 - v:.6f}" for u, v in uv]
    lines += [f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in normals]
    lines += ["f " + " ".join(f"{i + 1}/{i + 1}/{i + 1}" for i in face) for face in triangles]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as error:
        raise AssetIOError(path, str(error)) from error
    logger.info("Wrote mesh %s", path)
