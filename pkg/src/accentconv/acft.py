"""Binary tensor file IO.

Layout (all integers little-endian):

    magic   b"ACFT"
    version u32
    ndim    u32
    dims    u32[ndim]
    payload float32, row-major

Used for cached acoustic features, externally produced encoder features,
exported mel-spectrograms, and checkpoint parameter tensors.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACFT"
VERSION = 1

_MAX_NDIM = 8


class BadTensorFile(ValueError):
    """Raised when a tensor file is missing, truncated, or malformed."""


def tensor_bytes(array) -> bytes:
    """Serialize `array` (cast to float32) to the on-disk layout."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    """Deserialize one tensor; `name` labels error messages."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise BadTensorFile(f"bad feature file {name}: missing ACFT header")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise BadTensorFile(f"bad feature file {name}: unsupported version {version}")
    if ndim > _MAX_NDIM:
        raise BadTensorFile(f"bad feature file {name}: ndim {ndim} out of range")
    header_end = 12 + 4 * ndim
    if len(blob) < header_end:
        raise BadTensorFile(f"bad feature file {name}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise BadTensorFile(
            f"bad feature file {name}: payload is {len(blob) - header_end} bytes, "
            f"expected {4 * count}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    return flat.reshape(dims).astype(np.float32, copy=True)


def write_tensor(path, array) -> None:
    """Write `array` to `path` as float32, creating parent dirs if needed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`.

    Raises:
        BadTensorFile: if the file does not exist or violates the layout.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise BadTensorFile(f"bad feature file {path}: {exc}") from exc
    return tensor_from_bytes(blob, str(path))
