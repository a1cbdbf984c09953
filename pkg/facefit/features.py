from dataclasses import dataclass, field
from typing import Self

import numpy as np

from facefit.constants import BANK_FILTERS, BANK_KERNEL, BANK_LEVELS
from facefit.errors import ContractViolation
from facefit.tensor import Array, Tensor, conv2d, max_pool2

type FeaturePyramid = list[Tensor]


@dataclass(frozen=True, kw_only=True)
class FilterBank:
    """
    Frozen multi-scale convolution filters standing in for a face recognition network.

    Level 0 maps the 3 image channels to `filters` feature maps, every later level maps `filters` to `filters`.
    Levels are separated by 2x2 max pooling. Filters are plain arrays and never enter the tape as leaves.
    """

    levels: list[Array] = field(repr=False)
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.levels:
            msg = "a filter bank needs at least one level"
            raise ContractViolation(msg)
        for previous, current in zip(self.levels, self.levels[1:], strict=False):
            if current.shape[1] != previous.shape[0]:
                msg = f"filter level with {current.shape[1]} inputs follows a level with {previous.shape[0]} outputs"
                raise ContractViolation(msg)
        for filters in self.levels:
            filters.setflags(write=False)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @classmethod
    def seeded(cls, seed: int, *, levels: int = BANK_LEVELS, filters: int = BANK_FILTERS, kernel: int = BANK_KERNEL, channels: int = 3) -> Self:
        rng = np.random.default_rng(seed)
        weights: list[Array] = []
        inputs = channels
        for _ in range(levels):
            fan_in = inputs * kernel * kernel
            if fan_in < filters:
                msg = f"cannot orthogonalize {filters} filters of fan-in {fan_in}"
                raise ContractViolation(msg)
            q, _ = np.linalg.qr(rng.standard_normal((fan_in, filters)))
            weights.append(np.ascontiguousarray(q.T.reshape(filters, inputs, kernel, kernel)))
            inputs = filters
        return cls(levels=weights, seed=seed)

    @classmethod
    def delta(cls, channels: int = 3, *, levels: int = 1, kernel: int = 1) -> Self:
        weights: list[Array] = []
        for _ in range(levels):
            filters = np.zeros((channels, channels, kernel, kernel))
            filters[np.arange(channels), np.arange(channels), kernel // 2, kernel // 2] = 1.0
            weights.append(filters)
        return cls(levels=weights)


def conv2d_fixed(image: Tensor, bank: FilterBank) -> FeaturePyramid:
    if image.ndim != 3 or image.shape[0] != bank.levels[0].shape[1]:
        msg = f"image of shape {image.shape} does not match a bank expecting {bank.levels[0].shape[1]} channels"
        raise ContractViolation(msg)
    pyramid: FeaturePyramid = []
    features = image
    for index, filters in enumerate(bank.levels):
        if index > 0:
            features = max_pool2(features)
        features = conv2d(features, filters).max0()
        pyramid.append(features)
    return pyramid


def embedding(image: Tensor, bank: FilterBank) -> Tensor:
    return conv2d_fixed(image, bank)[-1].mean((1, 2))


def to_chw(image: Tensor) -> Tensor:
    """HxWx3 image to the 3xHxW layout the bank convolves."""
    return image.transpose(2, 0, 1)
