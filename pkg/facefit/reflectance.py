import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Self

import numpy as np

from facefit.constants import CHANNELS, CLAMP_BAND, GENERATOR_MAGIC, LATENT_DIM, LATENT_LEVELS, NORMAL_MIN_Z
from facefit.container import ArrayContainer
from facefit.errors import AssetIOError, ContractViolation
from facefit.tensor import Array, Tensor, concat, matvec, normalize3, resample, smooth_clamp

logger = logging.getLogger(__name__)

RANK_TOLERANCE: float = 1e-10


@dataclass(kw_only=True)
class ReflectanceMaps:
    """Diffuse albedo (3xRxR), monochrome specular albedo (1xRxR) and unit tangent-space normals (3xRxR)."""

    diffuse: Tensor
    specular: Tensor
    normals: Tensor

    @property
    def resolution(self) -> int:
        return self.diffuse.shape[-1]

    def encode(self) -> Array:
        """7xRxR stack with normals encoded as (n + 1) / 2."""
        return np.concatenate([self.diffuse.data, self.specular.data, (self.normals.data + 1.0) / 2.0])

    @classmethod
    def decode(cls, stack: Array) -> Self:
        if stack.ndim != 3 or stack.shape[0] != CHANNELS:
            msg = f"expected a {CHANNELS}xRxR reflectance stack, got {stack.shape}"
            raise ContractViolation(msg)
        encoded = 2.0 * stack[4:7] - 1.0
        encoded[2] = np.maximum(encoded[2], NORMAL_MIN_Z)
        normals = encoded / np.linalg.norm(encoded, axis=0, keepdims=True)
        return cls(diffuse=Tensor(stack[0:3].copy()), specular=Tensor(stack[3:4].copy()), normals=Tensor(normals))

    def detached(self) -> Self:
        return type(self)(diffuse=self.diffuse.detach(), specular=self.specular.detach(), normals=self.normals.detach())


def upsample_matrix(size: int) -> Array:
    """2x bilinear upsampling of a length-`size` signal with half-pixel centres and edge clamping."""
    matrix = np.zeros((2 * size, size))
    for row in range(2 * size):
        x = (row + 0.5) / 2.0 - 0.5
        left = int(np.floor(x))
        frac = x - left
        matrix[row, min(max(left, 0), size - 1)] += 1.0 - frac
        matrix[row, min(max(left + 1, 0), size - 1)] += frac
    return matrix


def downsample_matrix(size: int) -> Array:
    """2x box downsampling of a length-`size` signal."""
    matrix = np.zeros((size // 2, size))
    rows = np.arange(size // 2)
    matrix[rows, 2 * rows] = 0.5
    matrix[rows, 2 * rows + 1] = 0.5
    return matrix


def ladder(resolution: int, levels: int) -> list[int]:
    """Per-level resolutions anchored at the top: level l is resolution / 2^(levels - 1 - l), so 128 with 8 levels starts at 1."""
    scale = 2 ** (levels - 1)
    if levels < 1 or resolution % scale:
        msg = f"resolution {resolution} is not divisible by 2^{levels - 1}"
        raise ContractViolation(msg)
    return [resolution // 2 ** (levels - 1 - level) for level in range(levels)]


def laplacian_residuals(stack: Array, levels: int) -> list[Array]:
    """Residual images per level, coarsest first; upsampling and summing them restores `stack` exactly."""
    gaussians = [stack]
    for _ in range(levels - 1):
        down = downsample_matrix(gaussians[-1].shape[-1])
        gaussians.append(np.einsum("ij,cjk,lk->cil", down, gaussians[-1], down))
    gaussians.reverse()
    residuals = [gaussians[0]]
    for coarse, fine in zip(gaussians, gaussians[1:], strict=False):
        up = upsample_matrix(coarse.shape[-1])
        residuals.append(fine - np.einsum("ij,cjk,lk->cil", up, coarse, up))
    return residuals


@dataclass(frozen=True, kw_only=True, eq=False)
class GeneratorLevel:
    resolution: int
    mean: Array
    basis: Array
    rank: int

    def __post_init__(self) -> None:
        if self.mean.shape != (CHANNELS, self.resolution, self.resolution) or self.basis.shape[0] != self.mean.size:
            msg = f"level at {self.resolution} has mean {self.mean.shape} and basis {self.basis.shape}"
            raise ContractViolation(msg)


@dataclass(kw_only=True, eq=False)
class PyramidGenerator:
    """
    Linear Laplacian-pyramid generator of reflectance maps.

    Level l owns a residual mean and a basis over the concatenated 7 channels at resolution r_l; row l of the
    latent W drives its basis. Resolutions double per level up to the output resolution. Tuning offsets are
    added to the latent rows of the middle levels only.
    """

    levels: list[GeneratorLevel]
    offsets: Array = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self) -> None:
        resolutions = [level.resolution for level in self.levels]
        if not resolutions or any(fine != 2 * coarse for coarse, fine in zip(resolutions, resolutions[1:], strict=False)):
            msg = f"generator resolutions must double per level, got {resolutions}"
            raise ContractViolation(msg)
        dims = {level.basis.shape[1] for level in self.levels}
        if len(dims) != 1:
            msg = f"generator levels disagree on latent dimension: {sorted(dims)}"
            raise ContractViolation(msg)
        if self.offsets.size == 0:
            self.offsets = np.zeros((self.depth, self.latent_dim))
        if self.offsets.shape != (self.depth, self.latent_dim):
            msg = f"offsets {self.offsets.shape} do not match a {self.depth}x{self.latent_dim} latent"
            raise ContractViolation(msg)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def latent_dim(self) -> int:
        return self.levels[0].basis.shape[1]

    @property
    def resolution(self) -> int:
        return self.levels[-1].resolution

    @property
    def tunable_levels(self) -> range:
        return range(self.depth // 4, 3 * self.depth // 4)

    @cached_property
    def upsamplers(self) -> list[Array]:
        """Per level, the matrix carrying a row of length r_l up to the output resolution."""
        matrices = [np.eye(self.resolution)]
        for level in reversed(self.levels[:-1]):
            matrices.append(matrices[-1] @ upsample_matrix(level.resolution))
        matrices.reverse()
        return matrices

    def check_latent(self, w: Tensor) -> None:
        if w.shape != (self.depth, self.latent_dim):
            msg = f"latent of shape {w.shape} does not match a {self.depth}x{self.latent_dim} generator"
            raise ContractViolation(msg)

    def pre_squash(self, w: Tensor, offsets: Tensor | None = None) -> Tensor:
        self.check_latent(w)
        if offsets is None:
            offsets = Tensor(self.offsets)
        elif offsets.shape != self.offsets.shape:
            msg = f"offsets of shape {offsets.shape} do not match {self.offsets.shape}"
            raise ContractViolation(msg)
        total: Tensor | None = None
        for index, (level, upsampler) in enumerate(zip(self.levels, self.upsamplers, strict=True)):
            row = w[index] + offsets[index] if index in self.tunable_levels else w[index]
            residual = matvec(Tensor(level.basis), row).reshape(CHANNELS, level.resolution, level.resolution) + level.mean
            if level.resolution != self.resolution:
                residual = resample(residual, upsampler, upsampler)
            total = residual if total is None else total + residual
        return total  # type: ignore[return-value]

    def generate(self, w: Tensor, offsets: Tensor | None = None) -> ReflectanceMaps:
        stack = self.pre_squash(w, offsets)
        return ReflectanceMaps(
            diffuse=smooth_clamp(stack[0:3], 0.0, 1.0, CLAMP_BAND),
            specular=smooth_clamp(stack[3:4], 0.0, 1.0, CLAMP_BAND),
            normals=decode_normals(stack[4:7]),
        )

    def set_offsets(self, level: int, values: Array) -> None:
        if level not in self.tunable_levels:
            msg = f"level {level} is frozen, only levels {self.tunable_levels.start}..{self.tunable_levels.stop - 1} take tuning offsets"
            raise ContractViolation(msg)
        self.offsets[level] = values

    def reset_offsets(self) -> None:
        self.offsets = np.zeros((self.depth, self.latent_dim))

    def sample_latents(self, rng: np.random.Generator, count: int) -> Array:
        """Draw `count` latent rows from the (identity) prior."""
        return rng.standard_normal((count, self.latent_dim))

    def save(self, path: str | Path) -> None:
        with ArrayContainer(path, GENERATOR_MAGIC, "w") as container:
            container.meta = {
                "levels": [{"resolution": level.resolution, "rank": level.rank} for level in self.levels],
                "latent_dim": self.latent_dim,
            }
            for index, level in enumerate(self.levels):
                container.add(f"mean_{index}", level.mean)
                container.add(f"basis_{index}", level.basis)
            container.add("offsets", self.offsets)

    @classmethod
    def load(cls, path: str | Path) -> Self:
        container = ArrayContainer(path, GENERATOR_MAGIC)
        try:
            levels = [
                GeneratorLevel(resolution=entry["resolution"], rank=entry["rank"], mean=container.get(f"mean_{index}"), basis=container.get(f"basis_{index}"))
                for index, entry in enumerate(container.meta["levels"])
            ]
            generator = cls(levels=levels, offsets=container.get("offsets"))
        except (KeyError, TypeError, ContractViolation) as error:
            raise AssetIOError(path, f"invalid generator: {error}") from error
        logger.info("Loaded generator %s: %d levels up to %d, latent dim %d", path, generator.depth, generator.resolution, generator.latent_dim)
        return generator


def decode_normals(encoded: Tensor) -> Tensor:
    """3xRxR encoded normals to unit vectors with z forced to at least NORMAL_MIN_Z before normalization."""
    vectors = encoded * 2.0 - 1.0
    lifted_z = (vectors[2:3] - NORMAL_MIN_Z).max0() + NORMAL_MIN_Z
    return normalize3(concat([vectors[0:2], lifted_z]).transpose(1, 2, 0)).transpose(2, 0, 1)


def fit_generator(corpus: Sequence[ReflectanceMaps], *, levels: int = LATENT_LEVELS, latent_dim: int = LATENT_DIM) -> PyramidGenerator:
    if not corpus:
        msg = "cannot fit a generator to an empty corpus"
        raise ContractViolation(msg)
    resolution = corpus[0].resolution
    if any(maps.resolution != resolution for maps in corpus):
        msg = "corpus maps must share one resolution"
        raise ContractViolation(msg)
    ladder(resolution, levels)
    per_sample = [laplacian_residuals(maps.encode(), levels) for maps in corpus]
    fitted: list[GeneratorLevel] = []
    for index in range(levels):
        samples = np.stack([residuals[index].reshape(-1) for residuals in per_sample])
        mean = samples.mean(axis=0)
        _, singular, components = np.linalg.svd(samples - mean, full_matrices=False)
        rank = int(np.sum(singular > RANK_TOLERANCE * max(float(singular[0]), 1.0))) if singular.size else 0
        rank = min(rank, latent_dim)
        if rank < latent_dim:
            logger.warning("Generator level %d truncated to rank %d of %d", index, rank, latent_dim)
        scale = singular[:rank] / np.sqrt(max(len(corpus) - 1, 1))
        basis = np.zeros((samples.shape[1], latent_dim))
        basis[:, :rank] = components[:rank].T * scale
        size = per_sample[0][index].shape[-1]
        fitted.append(GeneratorLevel(resolution=size, mean=mean.reshape(CHANNELS, size, size), basis=basis, rank=rank))
    logger.info("Fitted a %d-level generator at %d from %d maps", levels, resolution, len(corpus))
    return PyramidGenerator(levels=fitted)


def project(generator: PyramidGenerator, maps: ReflectanceMaps) -> Tensor:
    """Least-squares latent whose pre-squash output best reproduces `maps`."""
    if maps.resolution != generator.resolution:
        msg = f"maps at {maps.resolution} cannot be projected onto a generator at {generator.resolution}"
        raise ContractViolation(msg)
    residuals = laplacian_residuals(maps.encode(), generator.depth)
    rows = [np.linalg.lstsq(level.basis, (residual - level.mean).reshape(-1), rcond=None)[0] for level, residual in zip(generator.levels, residuals, strict=True)]
    return Tensor(np.stack(rows))


@dataclass(frozen=True, kw_only=True, eq=False)
class LatentPca:
    mean: Array
    components: Array
    explained_variance: Array

    def __post_init__(self) -> None:
        self.components.setflags(write=False)


def latent_pca(generator: PyramidGenerator, n_samples: int, seed: int) -> LatentPca:
    """Principal directions of the latent prior, one row per component, strongest first."""
    if n_samples < generator.latent_dim:
        msg = f"latent PCA needs at least {generator.latent_dim} samples, got {n_samples}"
        raise ContractViolation(msg)
    samples = generator.sample_latents(np.random.default_rng(seed), n_samples)
    mean = samples.mean(axis=0)
    covariance = np.cov(samples - mean, rowvar=False)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    return LatentPca(mean=mean, components=eigenvectors[:, order].T.copy(), explained_variance=eigenvalues[order])


def manipulate(w: Tensor, pca: LatentPca, component: int, amount: float, levels: Sequence[int] | None = None) -> Tensor:
    """Move the latent rows in `levels` (all by default) `amount` standard deviations along one principal direction."""
    if not 0 <= component < pca.components.shape[0]:
        msg = f"component {component} is out of range"
        raise ContractViolation(msg)
    step = amount * np.sqrt(pca.explained_variance[component]) * pca.components[component]
    edited = w.data.copy()
    edited[list(levels) if levels is not None else slice(None)] += step
    return Tensor(edited)
