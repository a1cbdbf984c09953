import logging
from pathlib import Path
from typing import Literal

import cv2
import numpy as np

from facefit.constants import LANDMARK_COUNT
from facefit.errors import AssetIOError
from facefit.reflectance import ReflectanceMaps
from facefit.tensor import Array

logger = logging.getLogger(__name__)

UINT8_MAX: float = 255.0
UINT16_MAX: float = 65535.0
MAP_FILES: dict[str, str] = {"diffuse": "diffuse.png", "specular": "specular.png", "normals": "normals.png"}
MAP_MANIFEST: str = "maps.txt"


def srgb_to_linear(values: Array) -> Array:
    values = np.clip(values, 0.0, 1.0)
    return np.where(values <= 0.04045, values / 12.92, ((values + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(values: Array) -> Array:
    values = np.clip(values, 0.0, 1.0)
    return np.where(values <= 0.0031308, values * 12.92, 1.055 * values ** (1.0 / 2.4) - 0.055)


def hex_to_linear(color: str) -> Array:
    value = color.lstrip("#")
    return srgb_to_linear(np.array([int(value[i : i + 2], 16) for i in (0, 2, 4)], dtype=np.float64) / UINT8_MAX)


def psnr(a: Array, b: Array, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))


def _check_png(path: Path) -> None:
    if path.suffix.lower() != ".png":
        raise AssetIOError(path, "only PNG images are supported")


def load_image(path: str | Path) -> Array:
    """PNG to an HxWx3 linear-RGB float image in [0, 1]; 8-bit files are sRGB-decoded, 16-bit files are taken as linear."""
    path = Path(path)
    _check_png(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise AssetIOError(path, "unreadable or corrupt image")
    match raw.dtype:
        case np.uint8:
            image = srgb_to_linear(raw.astype(np.float64) / UINT8_MAX)
        case np.uint16:
            image = raw.astype(np.float64) / UINT16_MAX
        case _:
            raise AssetIOError(path, f"unsupported sample type {raw.dtype}")
    if image.ndim == 2:  # noqa: PLR2004
        return np.repeat(image[..., None], 3, axis=2)
    match image.shape[2]:
        case 1:
            return np.repeat(image, 3, axis=2)
        case 3:
            return np.ascontiguousarray(image[..., ::-1])
        case 4:
            return np.ascontiguousarray(image[..., 2::-1])
        case channels:
            raise AssetIOError(path, f"unsupported channel count {channels}")


def save_image(path: str | Path, image: Array, bit_depth: Literal[8, 16] = 8) -> None:
    """Write an HxW or HxWxC linear image: 8-bit files are sRGB-encoded for display, 16-bit files stay linear."""
    path = Path(path)
    _check_png(path)
    if bit_depth == 8:  # noqa: PLR2004
        data = np.round(linear_to_srgb(image) * UINT8_MAX).astype(np.uint8)
    else:
        data = np.round(np.clip(image, 0.0, 1.0) * UINT16_MAX).astype(np.uint16)
    if data.ndim == 3 and data.shape[2] == 3:  # noqa: PLR2004
        data = np.ascontiguousarray(data[..., ::-1])
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        written = cv2.imwrite(str(path), data)
    except cv2.error as error:
        raise AssetIOError(path, str(error)) from error
    if not written:
        raise AssetIOError(path, "encoder refused the image")
    logger.debug("Wrote image %s", path)


def save_maps(directory: str | Path, maps: ReflectanceMaps) -> list[Path]:
    """16-bit PNGs of the three reflectance maps plus a sidecar recording their colorspace."""
    directory = Path(directory)
    stack = maps.encode()
    paths: list[Path] = []
    for (name, file), channels in zip(MAP_FILES.items(), (slice(0, 3), slice(3, 4), slice(4, 7)), strict=True):
        image = np.transpose(stack[channels], (1, 2, 0))
        path = directory / file
        save_image(path, image[..., 0] if image.shape[2] == 1 else image, bit_depth=16)
        paths.append(path)
        logger.debug("Saved %s map", name)
    manifest = directory / MAP_MANIFEST
    manifest.write_text("colorspace = linear\nnormals = encoded (n + 1) / 2\nbit_depth = 16\n", encoding="utf-8")
    paths.append(manifest)
    return paths


def load_maps(directory: str | Path) -> ReflectanceMaps:
    directory = Path(directory)
    diffuse = load_image(directory / MAP_FILES["diffuse"])
    specular = load_image(directory / MAP_FILES["specular"])[..., :1]
    normals = load_image(directory / MAP_FILES["normals"])
    stack = np.concatenate([np.transpose(part, (2, 0, 1)) for part in (diffuse, specular, normals)])
    return ReflectanceMaps.decode(stack)


def load_texture(path: str | Path) -> Array:
    """Albedo PNG as a 3xRxR linear array."""
    return np.ascontiguousarray(np.transpose(load_image(path), (2, 0, 1)))


def save_texture(path: str | Path, texture: Array, bit_depth: Literal[8, 16] = 16) -> None:
    save_image(path, np.transpose(texture, (1, 2, 0)), bit_depth=bit_depth)


def load_landmarks(path: str | Path) -> Array:
    """68 lines of whitespace separated `x y` pixel coordinates, origin top-left."""
    try:
        landmarks = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as error:
        raise AssetIOError(path, f"unreadable landmarks: {error}") from error
    if landmarks.shape != (LANDMARK_COUNT, 2):
        raise AssetIOError(path, f"expected {LANDMARK_COUNT}x2 landmarks, got {landmarks.shape}")
    return landmarks


def save_landmarks(path: str | Path, landmarks: Array) -> None:
    try:
        np.savetxt(path, landmarks, fmt="%.17g")
    except OSError as error:
        raise AssetIOError(path, str(error)) from error


def save_raw(path: str | Path, array: Array) -> None:
    """Debug dump: one text header line with dtype and shape, then little-endian float64 samples."""
    data = np.ascontiguousarray(array, dtype="<f8")
    header = f"float64 {' '.join(str(size) for size in data.shape)}\n".encode("ascii")
    try:
        Path(path).write_bytes(header + data.tobytes())
    except OSError as error:
        raise AssetIOError(path, str(error)) from error
