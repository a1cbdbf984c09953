import numpy as np
import pytest

from facefit.errors import ContractViolation, DomainError
from facefit.features import FilterBank
from facefit.losses import (
    chromaticity,
    identity_distance,
    loss_chroma,
    loss_flip,
    loss_identity,
    loss_landmark,
    loss_perceptual,
    loss_photometric,
    loss_w_reg,
    weighted_sum,
)
from facefit.tensor import Tensor


@pytest.fixture(scope="module")
def bank() -> FilterBank:
    return FilterBank.seeded(0, levels=3, filters=8, kernel=3)


class TestLandmark:
    def test_zero_at_the_target(self, rng: np.random.Generator) -> None:
        points = rng.uniform(0.0, 64.0, (68, 2))
        assert loss_landmark(Tensor(points), points).item() == 0.0

    def test_normalized_by_the_diagonal(self) -> None:
        target = np.zeros((68, 2))
        predicted = target.copy()
        predicted[10] = [3.0, 4.0]
        assert loss_landmark(Tensor(predicted), target, 10.0).item() == pytest.approx(0.5)

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ContractViolation):
            loss_landmark(Tensor(np.zeros((67, 2))), np.zeros((68, 2)))


class TestPhotometric:
    def test_mean_over_covered_pixels(self) -> None:
        target = np.zeros((4, 4, 3))
        image = np.full((4, 4, 3), 0.5)
        image[:, 2:] = 9.0
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, :2] = True
        assert loss_photometric(target, Tensor(image), mask).item() == pytest.approx(0.5)

    def test_uncovered_pixels_get_no_gradient(self) -> None:
        image = Tensor(np.ones((4, 4, 3)), requires_grad=True)
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        loss_photometric(np.zeros((4, 4, 3)), image, mask).backward()
        np.testing.assert_allclose(image.grad[0, 0], 1.0 / 3.0)
        assert image.grad.reshape(-1, 3)[1:].sum() == 0.0

    def test_empty_mask(self) -> None:
        with pytest.raises(DomainError, match="zero covered"):
            loss_photometric(np.zeros((4, 4, 3)), Tensor(np.zeros((4, 4, 3))), np.zeros((4, 4), dtype=bool))

    def test_resolution_mismatch(self) -> None:
        with pytest.raises(ContractViolation):
            loss_photometric(np.zeros((4, 4, 3)), Tensor(np.zeros((8, 8, 3))), np.ones((8, 8), dtype=bool))


class TestFeatureLosses:
    def test_identity_distance(self) -> None:
        embedding = np.array([1.0, 2.0, 3.0])
        assert identity_distance(embedding, Tensor(2.0 * embedding)).item() == pytest.approx(0.0, abs=1e-12)
        assert identity_distance(embedding, Tensor(-embedding)).item() == pytest.approx(2.0)
        assert identity_distance(np.array([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(1.0)

    def test_zero_embedding(self) -> None:
        with pytest.raises(DomainError, match="zero-norm"):
            identity_distance(np.zeros(3), Tensor([1.0, 0.0, 0.0]))

    def test_identical_images(self, bank: FilterBank, rng: np.random.Generator) -> None:
        image = rng.uniform(0.0, 1.0, (16, 16, 3))
        assert loss_identity(image, Tensor(image), bank).item() == pytest.approx(0.0, abs=1e-12)
        assert loss_perceptual(image, Tensor(image), bank).item() == 0.0

    def test_perceptual_grows_with_distortion(self, bank: FilterBank, rng: np.random.Generator) -> None:
        image = rng.uniform(0.2, 0.8, (16, 16, 3))
        noise = rng.standard_normal(image.shape)
        small = loss_perceptual(image, Tensor(image + 0.01 * noise), bank).item()
        large = loss_perceptual(image, Tensor(image + 0.1 * noise), bank).item()
        assert 0.0 < small < large


class TestRegularizers:
    def test_latent_regularizer_is_a_mean(self) -> None:
        w_init = np.zeros((2, 3))
        w = np.zeros((2, 3))
        w[0, 0] = 3.0
        assert loss_w_reg(Tensor(w), w_init).item() == pytest.approx(1.5)

    def test_latent_shape_mismatch(self) -> None:
        with pytest.raises(ContractViolation):
            loss_w_reg(Tensor(np.zeros((2, 3))), np.zeros((3, 3)))

    def test_symmetric_albedo_has_zero_flip_loss(self, rng: np.random.Generator) -> None:
        half = rng.uniform(0.0, 1.0, (3, 8, 4))
        assert loss_flip(Tensor(np.concatenate([half, half[..., ::-1]], axis=-1))).item() == 0.0

    def test_flip_loss_value(self) -> None:
        albedo = np.zeros((3, 4, 4))
        albedo[:, :, 0] = 1.0
        assert loss_flip(Tensor(albedo)).item() == pytest.approx(0.5)

    def test_flip_needs_a_square_map(self) -> None:
        with pytest.raises(ContractViolation):
            loss_flip(Tensor(np.zeros((3, 4, 8))))


class TestChroma:
    def test_chromaticity_sums_to_one(self, rng: np.random.Generator) -> None:
        np.testing.assert_allclose(chromaticity(rng.uniform(0.1, 1.0, (3, 4, 4))).data.sum(axis=0), 1.0, atol=1e-12)

    def test_black_texels_stay_finite(self) -> None:
        assert np.all(chromaticity(np.zeros((3, 2, 2))).data == 0.0)

    def test_brightness_is_free(self, rng: np.random.Generator) -> None:
        albedo = rng.uniform(0.1, 0.5, (3, 8, 8))
        assert loss_chroma(Tensor(1.7 * albedo), albedo).item() == pytest.approx(0.0, abs=1e-12)

    def test_hue_shift_is_penalized(self, rng: np.random.Generator) -> None:
        albedo = rng.uniform(0.1, 0.5, (3, 8, 8))
        assert loss_chroma(Tensor(albedo[::-1].copy()), albedo).item() > 0.0

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ContractViolation):
            loss_chroma(Tensor(np.zeros((3, 4, 4))), np.zeros((3, 8, 8)))


class TestWeightedSum:
    def test_total_and_components(self) -> None:
        total, components = weighted_sum({"a": lambda: Tensor(2.0), "b": lambda: Tensor(3.0)}, {"a": 0.5, "b": 2.0})
        assert total.item() == pytest.approx(7.0)
        assert components == {"a": 2.0, "b": 3.0}

    def test_zero_weights_are_skipped(self) -> None:
        def failing() -> Tensor:
            msg = "evaluated a zero-weight term"
            raise AssertionError(msg)

        total, components = weighted_sum({"a": lambda: Tensor(2.0), "b": failing}, {"a": 1.0, "b": 0.0})
        assert total.item() == 2.0
        assert "b" not in components
