import numpy as np
import pytest

from facefit.augment import SkinToneTarget, augment_albedo, histogram_match, mst_target, rect_texels, skin_mask
from facefit.constants import MONK_SKIN_TONES
from facefit.errors import ContractViolation
from facefit.imaging import hex_to_linear


@pytest.fixture
def albedo(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.1, 0.6, (3, 32, 32))


class TestSkinMask:
    def test_uniform_albedo_is_all_skin(self) -> None:
        np.testing.assert_allclose(skin_mask(np.full((3, 16, 16), 0.3)), 1.0)

    def test_falls_off_with_colour_distance(self) -> None:
        albedo = np.full((3, 16, 16), 0.5)
        distances = 0.04 * np.arange(16)
        albedo[:, 0, :] = 0.5 + distances / np.sqrt(3.0)
        mask = skin_mask(albedo)[0, 0]
        assert mask.shape == (16,)
        assert mask[0] == pytest.approx(1.0)
        assert np.all(np.diff(mask) <= 0.0)
        np.testing.assert_allclose(mask[distances <= 0.15 - 1e-9], 1.0)
        np.testing.assert_allclose(mask[distances >= 0.4 + 1e-9], 0.0)
        assert 0.0 < mask[6] < 1.0

    def test_rect_must_cover_a_texel(self) -> None:
        with pytest.raises(ContractViolation):
            rect_texels((0.5, 0.5, 0.5, 0.5), 4, 4)

    def test_rect_outside_unit_square(self) -> None:
        with pytest.raises(ContractViolation):
            rect_texels((0.5, 0.5, 1.5, 0.6), 16, 16)

    def test_forehead_texels(self) -> None:
        assert rect_texels((0.42, 0.18, 0.58, 0.28), 16, 16) == (slice(3, 4), slice(7, 9))


class TestHistogramMatch:
    def test_self_match_is_identity(self, albedo: np.ndarray) -> None:
        np.testing.assert_allclose(histogram_match(albedo, albedo), albedo, atol=1e-12)

    def test_constant_target(self, albedo: np.ndarray) -> None:
        np.testing.assert_array_equal(histogram_match(albedo, np.full((3, 8, 8), 0.3)), 0.3)

    def test_output_stays_in_the_target_range(self, albedo: np.ndarray, rng: np.random.Generator) -> None:
        target = rng.uniform(0.2, 0.4, (3, 24, 24))
        matched = histogram_match(albedo, target)
        for channel in range(3):
            assert matched[channel].min() >= target[channel].min()
            assert matched[channel].max() <= target[channel].max()

    def test_matches_the_target_mean(self, rng: np.random.Generator) -> None:
        source = rng.uniform(0.0, 1.0, (3, 64, 64))
        target = np.clip(rng.normal(0.35, 0.05, (3, 48, 48)), 0.0, 1.0)
        matched = histogram_match(source, target)
        np.testing.assert_allclose(matched.mean(axis=(1, 2)), target.mean(axis=(1, 2)), atol=0.01)

    def test_preserves_order(self, albedo: np.ndarray, rng: np.random.Generator) -> None:
        matched = histogram_match(albedo, rng.uniform(0.0, 1.0, (3, 16, 16)))
        order = np.argsort(albedo[0].reshape(-1), kind="stable")
        assert np.all(np.diff(matched[0].reshape(-1)[order]) >= 0.0)

    def test_channel_mismatch(self, albedo: np.ndarray) -> None:
        with pytest.raises(ContractViolation):
            histogram_match(albedo, albedo[:1])


class TestAugment:
    def test_zero_mask_returns_the_input(self, albedo: np.ndarray) -> None:
        target = mst_target(8, 32, seed=0)
        np.testing.assert_array_equal(augment_albedo(albedo, target, mask=np.zeros((1, 32, 32))), albedo)

    def test_full_mask_is_the_histogram_match(self, albedo: np.ndarray) -> None:
        target = mst_target(2, 32, seed=0)
        np.testing.assert_array_equal(augment_albedo(albedo, target, mask=np.ones((1, 32, 32))), histogram_match(albedo, target.albedo))

    def test_forehead_takes_the_target_tone(self, rng: np.random.Generator) -> None:
        albedo = np.clip(0.45 + 0.02 * rng.standard_normal((3, 32, 32)), 0.0, 1.0)
        target = SkinToneTarget(albedo=np.clip(0.15 + 0.02 * rng.standard_normal((3, 32, 32)), 0.0, 1.0), mst_label=7)
        augmented = augment_albedo(albedo, target)
        rows, cols = rect_texels((0.42, 0.18, 0.58, 0.28), 32, 32)
        np.testing.assert_allclose(augmented[:, rows, cols].mean(axis=(1, 2)), target.albedo.mean(axis=(1, 2)), atol=0.02)

    def test_target_validation(self) -> None:
        with pytest.raises(ContractViolation):
            SkinToneTarget(albedo=np.full((3, 4, 4), 1.5), mst_label=1)
        with pytest.raises(ContractViolation):
            SkinToneTarget(albedo=np.zeros((4, 4)), mst_label=1)


class TestMonkTargets:
    @pytest.mark.parametrize("label", [0, len(MONK_SKIN_TONES) + 1])
    def test_label_range(self, label: int) -> None:
        with pytest.raises(ContractViolation):
            mst_target(label, 16, seed=0)

    @pytest.mark.parametrize("label", [1, 5, 10])
    def test_target_sits_on_the_swatch(self, label: int) -> None:
        target = mst_target(label, 32, seed=3)
        assert target.albedo.shape == (3, 32, 32)
        assert target.albedo.min() >= 0.0
        assert target.albedo.max() <= 1.0
        np.testing.assert_allclose(target.albedo.mean(axis=(1, 2)), hex_to_linear(MONK_SKIN_TONES[label - 1]), rtol=0.05)

    def test_seeded(self) -> None:
        np.testing.assert_array_equal(mst_target(4, 16, seed=1).albedo, mst_target(4, 16, seed=1).albedo)
