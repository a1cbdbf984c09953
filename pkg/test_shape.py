from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from facefit.camera import Camera
from facefit.errors import AssetIOError, ContractViolation, DomainError
from facefit.gradcheck import check_gradients
from facefit.shape import (
    PcaShapeModel,
    ShapeCoeffs,
    export_obj,
    project_landmarks,
    reconstruct_shape,
    shape_regularizer,
    smooth_normals,
    vertex_normals,
)
from facefit.synthetic import icosphere
from facefit.tensor import Tensor

QUAD = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
QUAD_TRIANGLES = np.array([[0, 1, 2], [0, 2, 3]])


def angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0)))


def coeffs(identity: np.ndarray, expression: np.ndarray) -> ShapeCoeffs:
    return ShapeCoeffs(identity=Tensor(identity), expression=Tensor(expression))


class TestReconstruction:
    def test_zero_coefficients_give_the_mean(self, shape_model: PcaShapeModel) -> None:
        positions = reconstruct_shape(shape_model, ShapeCoeffs.zeros(shape_model))
        np.testing.assert_array_equal(positions.data, shape_model.mean)

    def test_linear_in_coefficients(self, shape_model: PcaShapeModel, rng: np.random.Generator) -> None:
        p = rng.standard_normal(shape_model.identity_dim)
        zero = np.zeros(shape_model.expression_dim)
        once = reconstruct_shape(shape_model, coeffs(p, zero)).data - shape_model.mean
        twice = reconstruct_shape(shape_model, coeffs(2.0 * p, zero)).data - shape_model.mean
        np.testing.assert_allclose(twice, 2.0 * once, atol=1e-12)

    def test_matches_a_naive_product(self, shape_model: PcaShapeModel, rng: np.random.Generator) -> None:
        p = rng.standard_normal(shape_model.identity_dim)
        e = rng.standard_normal(shape_model.expression_dim)
        expected = shape_model.mean.reshape(-1).copy()
        for row in range(expected.size):
            for k in range(p.size):
                expected[row] += shape_model.identity_basis[row, k] * p[k]
            for k in range(e.size):
                expected[row] += shape_model.expression_basis[row, k] * e[k]
        np.testing.assert_allclose(reconstruct_shape(shape_model, coeffs(p, e)).data.reshape(-1), expected, atol=1e-12)

    def test_coefficient_length(self, shape_model: PcaShapeModel) -> None:
        with pytest.raises(ContractViolation):
            reconstruct_shape(shape_model, coeffs(np.zeros(shape_model.identity_dim + 1), np.zeros(shape_model.expression_dim)))


class TestModel:
    def test_synthetic_model(self, shape_model: PcaShapeModel) -> None:
        assert shape_model.vertex_count == 642
        assert shape_model.identity_dim == 10
        assert shape_model.expression_dim == 5
        assert len(np.unique(shape_model.landmarks)) == 68
        assert np.all(np.diff(shape_model.identity_eigenvalues) < 0.0)

    def test_rejects_non_unit_basis(self, shape_model: PcaShapeModel) -> None:
        with pytest.raises(ContractViolation, match="unit norm"):
            replace(shape_model, identity_basis=2.0 * shape_model.identity_basis)

    def test_rejects_increasing_eigenvalues(self, shape_model: PcaShapeModel) -> None:
        with pytest.raises(ContractViolation, match="non-increasing"):
            replace(shape_model, identity_eigenvalues=shape_model.identity_eigenvalues[::-1].copy())

    def test_save_and_load(self, shape_model: PcaShapeModel, tmp_path: Path) -> None:
        path = tmp_path / "model.fmsm"
        shape_model.save(path)
        loaded = PcaShapeModel.load(path)
        np.testing.assert_array_equal(loaded.mean, shape_model.mean)
        np.testing.assert_array_equal(loaded.expression_basis, shape_model.expression_basis)
        np.testing.assert_array_equal(loaded.triangles, shape_model.triangles)
        np.testing.assert_array_equal(loaded.landmarks, shape_model.landmarks)

    def test_load_rejects_other_containers(self, tmp_path: Path) -> None:
        path = tmp_path / "model.fmsm"
        path.write_bytes(b"FMGN" + bytes(16))
        with pytest.raises(AssetIOError, match="magic"):
            PcaShapeModel.load(path)

    def test_export_obj(self, tmp_path: Path) -> None:
        path = tmp_path / "quad.obj"
        export_obj(path, QUAD, QUAD[:, :2], np.tile([0.0, 0.0, 1.0], (4, 1)), QUAD_TRIANGLES)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert sum(line.startswith("v ") for line in lines) == 4
        assert sum(line.startswith("vt ") for line in lines) == 4
        assert "f 1/1/1 2/2/2 3/3/3" in lines


class TestNormals:
    def test_flat_quad(self) -> None:
        normals = vertex_normals(Tensor(QUAD), QUAD_TRIANGLES)
        np.testing.assert_allclose(normals.data, np.tile([0.0, 0.0, 1.0], (4, 1)), atol=1e-12)

    def test_sphere_normals_are_radial(self) -> None:
        positions, triangles = icosphere(3)
        normals = vertex_normals(Tensor(positions), triangles).data
        assert angles(normals, positions).max() < 2.0
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)

    def test_isolated_vertex_defaults_to_z(self, caplog: pytest.LogCaptureFixture) -> None:
        positions = np.vstack([QUAD, [5.0, 5.0, 5.0]])
        normals = vertex_normals(Tensor(positions), QUAD_TRIANGLES)
        np.testing.assert_allclose(normals.data[4], [0.0, 0.0, 1.0])
        assert "no triangle" in caplog.text

    def test_gradients(self, rng: np.random.Generator) -> None:
        positions, triangles = icosphere(0)
        assert check_gradients(lambda t: vertex_normals(t[0], triangles), [positions + 0.05 * rng.standard_normal(positions.shape)]) < 1e-4

    def test_zero_smoothing_is_identity(self) -> None:
        normals = vertex_normals(Tensor(QUAD), QUAD_TRIANGLES)
        assert smooth_normals(normals, QUAD_TRIANGLES, 0) is normals

    def test_flat_mesh_is_a_fixed_point(self) -> None:
        normals = vertex_normals(Tensor(QUAD), QUAD_TRIANGLES)
        np.testing.assert_allclose(smooth_normals(normals, QUAD_TRIANGLES, 3).data, normals.data, atol=1e-12)

    def test_smoothing_reduces_noise(self, rng: np.random.Generator) -> None:
        positions, triangles = icosphere(3)
        noisy = positions + 0.3 * rng.standard_normal(positions.shape)
        noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
        deviations = [angles(smooth_normals(Tensor(noisy), triangles, iterations).data, positions).mean() for iterations in range(4)]
        assert all(later < earlier for earlier, later in zip(deviations, deviations[1:], strict=False))

    def test_negative_iterations(self) -> None:
        with pytest.raises(ContractViolation):
            smooth_normals(Tensor(np.tile([0.0, 0.0, 1.0], (4, 1))), QUAD_TRIANGLES, -1)


class TestLandmarks:
    @pytest.fixture
    def camera(self) -> Camera:
        return Camera.frontal(64, 64, 4.0)

    def test_optical_axis_hits_principal_point(self, camera: Camera) -> None:
        points = Tensor([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
        projected = project_landmarks(points, np.array([0, 1]), camera).data
        np.testing.assert_allclose(projected, [[32.0, 32.0], [32.0, 32.0]], atol=1e-9)

    def test_doubling_focal_doubles_offsets(self, camera: Camera, rng: np.random.Generator) -> None:
        points = Tensor(rng.uniform(-0.5, 0.5, (5, 3)))
        centre = np.array(camera.principal_point)
        base = project_landmarks(points, np.arange(5), camera).data - centre
        doubled = project_landmarks(points, np.arange(5), replace(camera, focal=2.0 * camera.focal)).data - centre
        np.testing.assert_allclose(doubled, 2.0 * base, atol=1e-9)

    def test_translation_invariance(self, camera: Camera, rng: np.random.Generator) -> None:
        points = rng.uniform(-0.5, 0.5, (6, 3))
        shift = np.array([0.2, -0.1, 0.3])
        moved = replace(camera, translation=Tensor(camera.translation.data - camera.matrix().data @ shift))
        np.testing.assert_allclose(
            project_landmarks(Tensor(points + shift), np.arange(6), moved).data,
            project_landmarks(Tensor(points), np.arange(6), camera).data,
            atol=1e-9,
        )

    def test_behind_camera(self) -> None:
        camera = Camera.frontal(64, 64, -5.0)
        with pytest.raises(DomainError, match="behind"):
            project_landmarks(Tensor([[0.0, 0.0, 0.0]]), np.array([0]), camera)

    def test_gradients_with_respect_to_pose(self, rng: np.random.Generator) -> None:
        points = rng.uniform(-0.5, 0.5, (10, 3))

        def projected(t: list[Tensor]) -> Tensor:
            camera = Camera(rotation=t[1], translation=t[2], focal=96.0, principal_point=(32.0, 32.0), width=64, height=64)
            return project_landmarks(t[0], np.arange(10), camera)

        assert check_gradients(projected, [points, np.array([np.pi, 0.1, 0.05]), np.array([0.1, 0.0, 4.0])]) < 1e-4


class TestRegularizer:
    def test_zero(self) -> None:
        assert shape_regularizer(Tensor(np.zeros(3)), np.ones(3)).item() == 0.0

    def test_value(self) -> None:
        assert shape_regularizer(Tensor([1.0]), np.array([4.0])).item() == pytest.approx(0.25)

    def test_gradient(self) -> None:
        p = Tensor([1.0, -2.0], requires_grad=True)
        shape_regularizer(p, np.array([4.0, 2.0])).backward()
        np.testing.assert_allclose(p.grad, [0.5, -2.0])

    def test_rejects_non_positive_eigenvalues(self) -> None:
        with pytest.raises(ContractViolation):
            shape_regularizer(Tensor([1.0]), np.array([0.0]))
