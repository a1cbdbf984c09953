import logging
from dataclasses import dataclass

import cv2
import numpy as np

from facefit.constants import FOREHEAD_RECT, HISTOGRAM_BINS, MASK_DISTANCE_HIGH, MASK_DISTANCE_LOW, MONK_SKIN_TONES
from facefit.errors import ContractViolation
from facefit.imaging import hex_to_linear
from facefit.tensor import Array

logger = logging.getLogger(__name__)

type Rect = tuple[float, float, float, float]


@dataclass(frozen=True, kw_only=True, eq=False)
class SkinToneTarget:
    albedo: Array
    mst_label: int

    def __post_init__(self) -> None:
        if self.albedo.ndim != 3 or self.albedo.shape[0] != 3:  # noqa: PLR2004
            msg = f"skin tone target must be a 3xRxR albedo, got {self.albedo.shape}"
            raise ContractViolation(msg)
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            msg = "skin tone target albedo must lie in [0, 1]"
            raise ContractViolation(msg)


def rect_texels(rect: Rect, height: int, width: int) -> tuple[slice, slice]:
    u0, v0, u1, v1 = rect
    if not (0.0 <= u0 <= u1 <= 1.0 and 0.0 <= v0 <= v1 <= 1.0):
        msg = f"rectangle {rect} is not inside the unit UV square"
        raise ContractViolation(msg)
    # texel centres at (i + 0.5) / size
    cols = np.flatnonzero(((np.arange(width) + 0.5) / width >= u0) & ((np.arange(width) + 0.5) / width <= u1))
    rows = np.flatnonzero(((np.arange(height) + 0.5) / height >= v0) & ((np.arange(height) + 0.5) / height <= v1))
    if cols.size == 0 or rows.size == 0:
        msg = f"rectangle {rect} covers no texel at {width}x{height}"
        raise ContractViolation(msg)
    return slice(int(rows[0]), int(rows[-1]) + 1), slice(int(cols[0]), int(cols[-1]) + 1)


def smoothstep(x: Array, low: float, high: float) -> Array:
    t = np.clip((x - low) / (high - low), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def skin_mask(albedo: Array, rect: Rect = FOREHEAD_RECT, *, low: float = MASK_DISTANCE_LOW, high: float = MASK_DISTANCE_HIGH) -> Array:
    """1xRxR weight that is 1 on texels close to the mean forehead tone and falls to 0 beyond `high`."""
    rows, cols = rect_texels(rect, albedo.shape[1], albedo.shape[2])
    reference = albedo[:, rows, cols].mean(axis=(1, 2))
    distance = np.linalg.norm(albedo - reference[:, None, None], axis=0)
    return (1.0 - smoothstep(distance, low, high))[None]


def _match_channel(source: Array, target: Array, bins: int) -> Array:
    source = np.clip(source.reshape(-1), 0.0, 1.0)
    target = np.clip(target.reshape(-1), 0.0, 1.0)
    tables = []
    for values in (source, target):
        index = np.minimum((values * bins).astype(np.intp), bins - 1)
        counts = np.bincount(index, minlength=bins)
        lows = np.full(bins, np.inf)
        highs = np.full(bins, -np.inf)
        np.minimum.at(lows, index, values)
        np.maximum.at(highs, index, values)
        tables.append((index, counts, np.cumsum(counts), lows, highs))
    index, counts, cdf, lows, highs = tables[0]
    _, target_counts, target_cdf, target_lows, target_highs = tables[1]
    # rank of every source value with in-bin texels spread evenly between the bin's extremes
    span = highs[index] - lows[index]
    count = counts[index]
    within = np.where(span > 0.0, (source - lows[index]) / np.where(span > 0.0, span, 1.0) * (count - 1) + 0.5, count / 2.0)
    rank = (cdf[index] - count + within) / source.size * target.size
    matched = np.minimum(np.searchsorted(target_cdf, rank, side="left"), bins - 1)
    position = rank - (target_cdf[matched] - target_counts[matched])
    slots = target_counts[matched] - 1
    fraction = np.clip((position - 0.5) / np.where(slots > 0, slots, 1), 0.0, 1.0)
    return target_lows[matched] + (target_highs[matched] - target_lows[matched]) * np.where(slots > 0, fraction, 0.0)


def histogram_match(albedo: Array, target: Array, bins: int = HISTOGRAM_BINS) -> Array:
    """Per-channel CDF matching of `albedo` onto the distribution of `target`."""
    if albedo.shape[0] != target.shape[0]:
        msg = f"cannot match {albedo.shape[0]} channels onto {target.shape[0]}"
        raise ContractViolation(msg)
    return np.stack([_match_channel(source, reference, bins).reshape(source.shape) for source, reference in zip(albedo, target, strict=True)])


def augment_albedo(albedo: Array, target: SkinToneTarget, rect: Rect = FOREHEAD_RECT, *, mask: Array | None = None) -> Array:
    """
    Blend the histogram-matched albedo into the skin texels: M * h(A, A*) + (1 - M) * A.

    `mask` overrides the skin mask, e.g. an all-zero mask returns the input unchanged.
    """
    weight = skin_mask(albedo, rect) if mask is None else np.broadcast_to(mask, (1, *albedo.shape[1:]))
    matched = histogram_match(albedo, target.albedo)
    logger.debug("Augmenting towards MST %d with mean mask %.3f", target.mst_label, float(np.mean(weight)))
    return weight * matched + (1.0 - weight) * albedo


def mst_target(label: int, resolution: int, seed: int) -> SkinToneTarget:
    """Seeded reference albedo around one Monk Skin-Tone swatch, with mild low-frequency variation."""
    if not 1 <= label <= len(MONK_SKIN_TONES):
        msg = f"Monk skin tone label must be in 1..{len(MONK_SKIN_TONES)}, got {label}"
        raise ContractViolation(msg)
    base = hex_to_linear(MONK_SKIN_TONES[label - 1])
    rng = np.random.default_rng(seed)
    noise = cv2.GaussianBlur(rng.standard_normal((resolution, resolution)), (0, 0), sigmaX=max(resolution / 16.0, 0.5))
    noise /= max(float(np.std(noise)), 1e-12)
    albedo = base[:, None, None] * (1.0 + 0.05 * noise[None])
    return SkinToneTarget(albedo=np.clip(albedo, 0.0, 1.0), mst_label=label)
