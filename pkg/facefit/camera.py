import logging
from dataclasses import dataclass, replace
from typing import Self

import cv2
import numpy as np

from facefit.constants import FOCAL_RATIO, NEAR_PLANE, SHININESS
from facefit.errors import ContractViolation, DomainError
from facefit.tensor import Array, Tensor, concat, matmul, matvec, normalize3, rodrigues, rotation_from_vector, softplus

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE: int = 8


def yaw_matrix(degrees: float) -> Array:
    angle = np.radians(degrees)
    return np.array([[np.cos(angle), 0.0, np.sin(angle)], [0.0, 1.0, 0.0], [-np.sin(angle), 0.0, np.cos(angle)]])


def inverse_softplus(value: Array | float) -> Array:
    value = np.asarray(value, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return value + np.log(-np.expm1(-value))


@dataclass(kw_only=True)
class Camera:
    """
    OpenCV pinhole camera: x right, y down, z forward.

    `rotation` (exp-map, radians) and `translation` are the optimizable 6-DoF pose mapping object space to
    camera space as X_c = R X + t. Focal length and principal point are fixed intrinsics in pixels.
    """

    rotation: Tensor
    translation: Tensor
    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.focal <= 0.0:
            msg = f"camera focal length must be positive, got {self.focal}"
            raise ContractViolation(msg)
        if self.width < MIN_IMAGE_SIZE or self.height < MIN_IMAGE_SIZE:
            msg = f"image size {self.width}x{self.height} is below {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}"
            raise ContractViolation(msg)
        if self.rotation.shape != (3,) or self.translation.shape != (3,):
            msg = "camera rotation and translation must be 3-vectors"
            raise ContractViolation(msg)

    @classmethod
    def frontal(cls, width: int, height: int, distance: float, *, focal_ratio: float = FOCAL_RATIO) -> Self:
        """Camera on the +Z axis of the object looking back at the origin."""
        return cls(
            rotation=Tensor([np.pi, 0.0, 0.0]),
            translation=Tensor([0.0, 0.0, distance]),
            focal=focal_ratio * width,
            principal_point=(width / 2.0, height / 2.0),
            width=width,
            height=height,
        )

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def parameters(self) -> list[Tensor]:
        return [self.rotation, self.translation]

    def trainable(self) -> Self:
        return replace(self, rotation=Tensor(self.rotation.data.copy(), requires_grad=True), translation=Tensor(self.translation.data.copy(), requires_grad=True))

    def detached(self) -> Self:
        return replace(self, rotation=Tensor(self.rotation.data.copy()), translation=Tensor(self.translation.data.copy()))

    def with_size(self, width: int, height: int) -> Self:
        scale = width / self.width
        return replace(
            self,
            focal=self.focal * scale,
            principal_point=(self.principal_point[0] * scale, self.principal_point[1] * height / self.height),
            width=width,
            height=height,
        )

    def turned(self, yaw_degrees: float) -> Self:
        """Same camera orbiting the object by `yaw_degrees` about the object's vertical axis."""
        rotation = cv2.Rodrigues(rotation_from_vector(self.rotation.data) @ yaw_matrix(yaw_degrees))[0].reshape(3)
        return replace(self, rotation=Tensor(rotation))

    def matrix(self) -> Tensor:
        return rodrigues(self.rotation)

    def center(self) -> Tensor:
        """Camera position in object space, -R^T t."""
        return -matvec(self.matrix().transpose(), self.translation)

    def to_camera(self, points: Tensor) -> Tensor:
        return matmul(points, self.matrix().transpose()) + self.translation

    def project(self, points: Tensor) -> Tensor:
        """Object-space Nx3 points to Nx2 pixel coordinates."""
        camera_points = self.to_camera(points)
        depth = camera_points[:, 2]
        behind = np.flatnonzero(depth.data <= NEAR_PLANE)
        if behind.size:
            msg = f"point {int(behind[0])} lies behind the camera (z = {depth.data[behind[0]]:.4g})"
            raise DomainError(msg)
        u = camera_points[:, 0] / depth * self.focal + self.principal_point[0]
        v = camera_points[:, 1] / depth * self.focal + self.principal_point[1]
        return concat([u.reshape(-1, 1), v.reshape(-1, 1)], axis=1)


@dataclass(kw_only=True)
class Lighting:
    """
    Directional lights with ambient gain and Blinn-Phong shininess, stored as raw optimizable tensors.

    Effective values: c_a = softplus(ambient), c_j = softplus(intensity_j), l_j = normalize(direction_j),
    s = exp(log_shininess).
    """

    ambient: Tensor
    directions: Tensor
    intensities: Tensor
    log_shininess: Tensor

    def __post_init__(self) -> None:
        if self.directions.ndim != 2 or self.directions.shape[1] != 3 or self.directions.shape[0] < 1:
            msg = f"lighting needs at least one 3-vector direction, got {self.directions.shape}"
            raise ContractViolation(msg)
        if self.intensities.shape != self.directions.shape:
            msg = f"light intensities {self.intensities.shape} do not match directions {self.directions.shape}"
            raise ContractViolation(msg)

    @classmethod
    def create(
        cls,
        *,
        directions: Array | list[list[float]],
        intensities: Array | list[list[float]],
        ambient: float = 1.0,
        shininess: float = SHININESS,
    ) -> Self:
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        intensities = np.broadcast_to(np.asarray(intensities, dtype=np.float64), directions.shape)
        if np.any(intensities < 0.0) or ambient < 0.0 or shininess <= 0.0:
            msg = "light intensities and ambient must be nonnegative and shininess positive"
            raise ContractViolation(msg)
        return cls(
            ambient=Tensor(inverse_softplus(ambient)),
            directions=Tensor(directions.copy()),
            intensities=Tensor(inverse_softplus(intensities)),
            log_shininess=Tensor(np.log(shininess)),
        )

    @classmethod
    def frontal(cls, *, shininess: float = SHININESS) -> Self:
        """One white light along the object's +Z axis with unit ambient gain."""
        return cls.create(directions=[[0.0, 0.0, 1.0]], intensities=[[1.0, 1.0, 1.0]], ambient=1.0, shininess=shininess)

    @property
    def count(self) -> int:
        return self.directions.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.ambient, self.directions, self.intensities, self.log_shininess]

    def trainable(self) -> Self:
        return type(self)(**{name: Tensor(tensor.data.copy(), requires_grad=True) for name, tensor in self.named()})

    def detached(self) -> Self:
        return type(self)(**{name: Tensor(tensor.data.copy()) for name, tensor in self.named()})

    def named(self) -> list[tuple[str, Tensor]]:
        return [("ambient", self.ambient), ("directions", self.directions), ("intensities", self.intensities), ("log_shininess", self.log_shininess)]

    def ambient_gain(self) -> Tensor:
        return softplus(self.ambient)

    def colors(self) -> Tensor:
        return softplus(self.intensities)

    def unit_directions(self) -> Tensor:
        return normalize3(self.directions)

    def shininess(self) -> Tensor:
        return self.log_shininess.exp()

    def select(self, index: int) -> Self:
        return type(self)(
            ambient=self.ambient,
            directions=self.directions[index : index + 1],
            intensities=self.intensities[index : index + 1],
            log_shininess=self.log_shininess,
        )
