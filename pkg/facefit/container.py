import json
import logging
import struct
from pathlib import Path
from typing import Any, Literal, Self

import numpy as np
from numpy.typing import NDArray

from facefit.constants import CONTAINER_VERSION
from facefit.errors import AssetIOError, ContractViolation

logger = logging.getLogger(__name__)

PREAMBLE: struct.Struct = struct.Struct("<4sII")
DTYPES: dict[str, str] = {"f": "<f8", "i": "<i8", "u": "<i8", "b": "<i8"}


class ArrayContainer:
    """
    Little-endian binary container of named arrays.

    Layout: 4 magic bytes, uint32 version, uint32 header size, a UTF-8 JSON header listing
    `{name, dtype, shape}` per array plus free-form metadata, then the raw arrays back to back
    in header order. Floats are stored as float64 and integers as int64.
    """

    def __init__(self, path: str | Path, magic: bytes, mode: Literal["r", "w"] = "r") -> None:
        self.path: Path = Path(path)
        self.magic: bytes = magic
        self.mode: Literal["r", "w"] = mode
        self.meta: dict[str, Any] = {}
        self.__arrays: dict[str, NDArray[Any]] = {}
        if mode == "r":
            self.__read()

    def __enter__(self) -> Self:
        return self

    def __exit__(self, exc_type: type[BaseException] | None, *_: object) -> None:
        if self.mode == "w" and exc_type is None:
            self.__write()

    def __contains__(self, name: str) -> bool:
        return name in self.__arrays

    @property
    def names(self) -> list[str]:
        return list(self.__arrays)

    def add(self, name: str, array: NDArray[Any]) -> None:
        if self.mode != "w":
            msg = f"{self.path} is open for reading"
            raise ContractViolation(msg)
        kind = np.asarray(array).dtype.kind
        if kind not in DTYPES:
            msg = f"array {name!r} has unsupported dtype {np.asarray(array).dtype}"
            raise ContractViolation(msg)
        self.__arrays[name] = np.ascontiguousarray(array, dtype=DTYPES[kind])

    def get(self, name: str) -> NDArray[Any]:
        if name not in self.__arrays:
            raise AssetIOError(self.path, f"missing array {name!r}")
        return self.__arrays[name]

    def __write(self) -> None:
        header = json.dumps(
            {
                "meta": self.meta,
                "arrays": [{"name": name, "dtype": array.dtype.str, "shape": list(array.shape)} for name, array in self.__arrays.items()],
            },
            sort_keys=True,
        ).encode("utf-8")
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("wb") as file:
                file.write(PREAMBLE.pack(self.magic, CONTAINER_VERSION, len(header)))
                file.write(header)
                for array in self.__arrays.values():
                    file.write(array.tobytes(order="C"))
        except OSError as error:
            raise AssetIOError(self.path, str(error)) from error
        logger.info("Wrote %s (%d arrays)", self.path, len(self.__arrays))

    def __read(self) -> None:
        try:
            payload = self.path.read_bytes()
        except OSError as error:
            raise AssetIOError(self.path, str(error)) from error
        if len(payload) < PREAMBLE.size:
            raise AssetIOError(self.path, "truncated preamble")
        magic, version, header_size = PREAMBLE.unpack_from(payload)
        if magic != self.magic:
            raise AssetIOError(self.path, f"bad magic {magic!r}, expected {self.magic!r}")
        if version != CONTAINER_VERSION:
            raise AssetIOError(self.path, f"unsupported container version {version}")
        offset = PREAMBLE.size + header_size
        try:
            header = json.loads(payload[PREAMBLE.size : offset].decode("utf-8"))
            entries = header["arrays"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as error:
            raise AssetIOError(self.path, f"corrupt header: {error}") from error
        self.meta = header.get("meta", {})
        for entry in entries:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            size = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            if offset + size > len(payload):
                raise AssetIOError(self.path, f"truncated array {entry['name']!r}")
            self.__arrays[entry["name"]] = np.frombuffer(payload, dtype=dtype, count=size // dtype.itemsize, offset=offset).reshape(shape).copy()
            offset += size
        if offset != len(payload):
            raise AssetIOError(self.path, f"{len(payload) - offset} trailing bytes")
