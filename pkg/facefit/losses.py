import logging
from collections.abc import Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from facefit.constants import CHROMA_EPSILON
from facefit.errors import ContractViolation, DomainError
from facefit.features import FeaturePyramid, FilterBank, conv2d_fixed, to_chw
from facefit.tensor import Array, Tensor, take

logger = logging.getLogger(__name__)

type LossTerms = Mapping[str, Callable[[], Tensor]]


def loss_landmark(predicted: Tensor, target: Array, diagonal: float = 1.0) -> Tensor:
    if predicted.shape != target.shape:
        msg = f"landmarks {predicted.shape} and {target.shape} differ in shape"
        raise ContractViolation(msg)
    return (predicted - target).norm() / diagonal


def loss_photometric(target: Array, image: Tensor, mask: NDArray[np.bool_]) -> Tensor:
    """Mean absolute colour difference over covered pixels."""
    if target.shape != image.shape:
        msg = f"target {target.shape} and rendering {image.shape} differ in resolution"
        raise ContractViolation(msg)
    pixels = np.flatnonzero(mask.reshape(-1))
    if pixels.size == 0:
        msg = "photometric loss over zero covered pixels, the fit has left the frame"
        raise DomainError(msg)
    channels = image.shape[-1]
    rendered = take(image.reshape(-1, channels), pixels)
    return (rendered - target.reshape(-1, channels)[pixels]).abs().mean()


def _pyramid(image: Tensor | Array, bank: FilterBank) -> FeaturePyramid:
    tensor = image if isinstance(image, Tensor) else Tensor(image)
    return conv2d_fixed(to_chw(tensor), bank)


def identity_distance(target_embedding: Array, embedding: Tensor) -> Tensor:
    target_norm = float(np.linalg.norm(target_embedding))
    norm = embedding.norm()
    if target_norm == 0.0 or norm.item() == 0.0:
        msg = "identity loss: zero-norm embedding"
        raise DomainError(msg)
    return 1.0 - (embedding * target_embedding).sum() / (norm * target_norm)


def perceptual_distance(target_features: list[Array], features: FeaturePyramid) -> Tensor:
    total: Tensor | None = None
    for target_level, level in zip(target_features, features, strict=True):
        term = (level - target_level).norm() / level.size
        total = term if total is None else total + term
    return total  # type: ignore[return-value]


def loss_identity(target: Array, image: Tensor, bank: FilterBank) -> Tensor:
    """1 - cosine similarity of the pooled deepest bank features."""
    target_embedding = _pyramid(target, bank)[-1].data.mean(axis=(1, 2))
    return identity_distance(target_embedding, _pyramid(image, bank)[-1].mean((1, 2)))


def loss_perceptual(target: Array, image: Tensor, bank: FilterBank) -> Tensor:
    """Sum over bank levels of the feature L2 distance divided by the level's element count."""
    return perceptual_distance([level.data for level in _pyramid(target, bank)], _pyramid(image, bank))


def loss_w_reg(w: Tensor, w_init: Array) -> Tensor:
    if w.shape != w_init.shape:
        msg = f"latent {w.shape} and its initialization {w_init.shape} differ in shape"
        raise ContractViolation(msg)
    deviation = w - w_init
    return (deviation * deviation).mean()


def loss_flip(albedo: Tensor) -> Tensor:
    """Mean absolute difference between the albedo and its horizontal mirror in UV space."""
    if albedo.shape[-1] != albedo.shape[-2]:
        msg = f"flip loss needs a square map, got {albedo.shape}"
        raise ContractViolation(msg)
    return (albedo - albedo[..., ::-1]).abs().mean()


def chromaticity(albedo: Tensor | Array) -> Tensor:
    rgb = albedo if isinstance(albedo, Tensor) else Tensor(albedo)
    total = rgb.sum(0, keepdims=True)
    return rgb / ((total - CHROMA_EPSILON).max0() + CHROMA_EPSILON)


def loss_chroma(albedo: Tensor, albedo_init: Array) -> Tensor:
    """Mean absolute chromaticity drift from the tuning-start snapshot; brightness changes are free."""
    if albedo.shape != albedo_init.shape:
        msg = f"albedo {albedo.shape} and snapshot {albedo_init.shape} differ in shape"
        raise ContractViolation(msg)
    return (chromaticity(albedo) - chromaticity(albedo_init).data).abs().mean()


def weighted_sum(terms: LossTerms, weights: Mapping[str, float]) -> tuple[Tensor, dict[str, float]]:
    """Sum of weight * term; terms with zero weight are neither evaluated nor reported."""
    total = Tensor(0.0)
    components: dict[str, float] = {}
    for name, weight in weights.items():
        if weight == 0.0:
            continue
        value = terms[name]()
        components[name] = value.item()
        total = total + value * weight
    return total, components
