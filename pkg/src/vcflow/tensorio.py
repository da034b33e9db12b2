"""Portable binary tensor files (VCFT) and the checkpoint container.

VCFT layout, all little-endian:

    bytes 0..3   magic b"VCFT"
    bytes 4..7   format version, uint32 (currently 1)
    byte  8      dtype code: 0=f32, 1=f64, 2=i32, 3=u8
    byte  9      rank
    then         rank * uint64 dims
    then         row-major payload

A checkpoint is a VCFC container: the same idea holding named VCFT blobs
plus two text sections (a shape manifest and a config echo), so parameters
survive round trips bit-exactly and stay readable from any language.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CorruptHeader,
    IOFailure,
    NonFiniteArray,
    UnsupportedDtype,
    UnsupportedVersion,
)

MAGIC = b"VCFT"
CONTAINER_MAGIC = b"VCFC"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_CODE_NAMES = {0: "f32", 1: "f64", 2: "i32", 3: "u8"}


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise UnsupportedDtype(f"dtype {array.dtype} has no VCFT code")
    if dtype.kind == "f" and not np.all(np.isfinite(array)):
        raise NonFiniteArray("refusing to serialize non-finite values")
    header = MAGIC + struct.pack("<IBB", VERSION, _DTYPE_CODES[dtype], array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype=dtype).tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a VCFT blob")
    if len(data) < 10:
        raise CorruptHeader("truncated VCFT header")
    version, dtype_code, rank = struct.unpack("<IBB", data[4:10])
    if version != VERSION:
        raise UnsupportedVersion(f"VCFT version {version} not supported")
    if dtype_code not in _CODE_DTYPES:
        raise CorruptHeader(f"unknown dtype code {dtype_code}")
    dims_end = 10 + 8 * rank
    if len(data) < dims_end:
        raise CorruptHeader("truncated dimension list")
    shape = struct.unpack(f"<{rank}Q", data[10:dims_end])
    dtype = _CODE_DTYPES[dtype_code]
    expected = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize
    payload = data[dims_end:]
    if len(payload) != expected:
        raise CorruptHeader(
            f"payload holds {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    blob = tensor_to_bytes(array)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    return tensor_from_bytes(data)


def _shape_manifest(params: dict[str, np.ndarray]) -> str:
    lines = []
    for name, array in params.items():
        array = np.asarray(array)
        code = _DTYPE_CODES[array.dtype.newbyteorder("<")]
        dims = "x".join(str(d) for d in array.shape) or "scalar"
        lines.append(f"{name} {_CODE_NAMES[code]} {dims}")
    return "\n".join(lines) + ("\n" if lines else "")


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    config_echo: str = "") -> None:
    """Write named parameter tensors plus shape manifest and config echo."""
    chunks = [CONTAINER_MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, array in params.items():
        encoded = name.encode("utf-8")
        blob = tensor_to_bytes(np.asarray(array))
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", len(blob)))
        chunks.append(blob)
    for text in (_shape_manifest(params), config_echo):
        encoded = text.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 4 or data[:4] != CONTAINER_MAGIC:
        raise BadMagic("not a VCFC checkpoint")
    if len(data) < 12:
        raise CorruptHeader("truncated checkpoint header")
    version, count = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} not supported")
    offset = 12
    params: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CorruptHeader("checkpoint ends mid-record")
        piece = data[offset:offset + n]
        offset += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (blob_len,) = struct.unpack("<Q", take(8))
        params[name] = tensor_from_bytes(take(blob_len))
    (manifest_len,) = struct.unpack("<Q", take(8))
    take(manifest_len)  # shape manifest is derived data; skip on load
    (echo_len,) = struct.unpack("<Q", take(8))
    echo = take(echo_len).decode("utf-8")
    return params, echo


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Dump a [0,1] grayscale image as binary 8-bit PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise UnsupportedDtype("PGM dump expects a 2-D image")
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + pixels.tobytes())
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
