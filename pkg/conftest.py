import numpy as np
import pytest

from facefit.config import FitConfig
from facefit.reflectance import PyramidGenerator, ReflectanceMaps, fit_generator
from facefit.shape import PcaShapeModel
from facefit.synthetic import Fixture, build_fixture, reflectance_corpus, synthetic_shape_model


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def config() -> FitConfig:
    return FitConfig(progress=False)


@pytest.fixture(scope="session")
def shape_model() -> PcaShapeModel:
    return synthetic_shape_model(11)


@pytest.fixture(scope="session")
def corpus() -> list[ReflectanceMaps]:
    return reflectance_corpus(12, 16, seed=5)


@pytest.fixture(scope="session")
def generator(corpus: list[ReflectanceMaps]) -> PyramidGenerator:
    return fit_generator(corpus, levels=4, latent_dim=4)


@pytest.fixture(scope="session")
def scene(config: FitConfig) -> Fixture:
    """Frontal 48x48 scene with a 4-level generator at 16x16; tests must copy before mutating."""
    return build_fixture(7, image_size=48, resolution=16, levels=4, latent_dim=4, corpus_size=12, config=config)
