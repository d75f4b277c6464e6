"""Dense tensor plumbing: spatial flattening, raster file I/O, PGM export.

Tensors are plain numpy float64 arrays, rank 1 through 5, row-major
semantics throughout.  The on-disk raster format ("RTS1") is:

    bytes 0..3    magic b"RTS1"
    bytes 4..7    rank, uint32 little-endian (1..5)
    next 4*rank   extents, uint32 little-endian each
    rest          payload, float32 little-endian, row-major,
                  exactly 4 * prod(extents) bytes

Compute stays in float64; files store float32.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

RASTER_MAGIC = b"RTS1"
MAX_RANK = 5


class RasterFormatError(ValueError):
    """Malformed raster file or un-storable tensor."""


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise RasterFormatError(f"{what} contains non-finite values")


def flatten_spatial(x: np.ndarray) -> np.ndarray:
    """(T, D, H, W) -> (T, D, H*W); cell (h, w) lands at index h*W + w."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"flatten_spatial expects rank 4, got rank {x.ndim}")
    t, d, h, w = x.shape
    return x.reshape(t, d, h * w)


def unflatten_spatial(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of flatten_spatial."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"unflatten_spatial expects rank 3, got rank {x.ndim}")
    t, d, p = x.shape
    if p != height * width:
        raise ValueError(f"cannot unflatten {p} cells into {height}x{width}")
    return x.reshape(t, d, height, width)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-raster-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_raster(path: str, tensor: np.ndarray) -> None:
    """Serialize a rank 1..5 finite tensor; float64 values are cast to float32."""
    arr = np.asarray(tensor, dtype=np.float64)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise RasterFormatError(f"raster rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if min(arr.shape) == 0:
        raise RasterFormatError("zero extents are not storable")
    _require_finite(arr, "tensor")
    with np.errstate(over="ignore"):
        payload = arr.astype("<f4")
    ## catch float32 overflow (large float64 -> inf) before it reaches disk
    _require_finite(payload, "float32-cast tensor")
    header = RASTER_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write(path, header + payload.tobytes(order="C"))


def read_raster(path: str) -> np.ndarray:
    """Read an RTS1 file back into a float64 array; fails loudly, never partially."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise RasterFormatError(f"{path}: shorter than any valid header")
    if blob[:4] != RASTER_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack("<I", blob[4:8])
    if not 1 <= rank <= MAX_RANK:
        raise RasterFormatError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    if len(blob) < 8 + 4 * rank:
        raise RasterFormatError(f"{path}: truncated extent list")
    extents = struct.unpack(f"<{rank}I", blob[8 : 8 + 4 * rank])
    if any(e == 0 for e in extents):
        raise RasterFormatError(f"{path}: zero extent in {extents}")
    count = 1
    for e in extents:
        count *= e
    expected = 8 + 4 * rank + 4 * count
    if len(blob) != expected:
        raise RasterFormatError(
            f"{path}: payload length mismatch, extents {extents} need "
            f"{expected} bytes total but file has {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=8 + 4 * rank, count=count)
    out = flat.astype(np.float64).reshape(extents)
    if not np.all(np.isfinite(out)):
        raise RasterFormatError(f"{path}: payload contains non-finite values")
    return out


def export_pgm(path: str, image: np.ndarray) -> None:
    """Write a (H, W) map with values in [0, 1] as binary PGM (P5, maxval 255).

    Quantization is round-half-away-from-zero: byte = floor(255*v + 0.5).
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM export expects rank 2, got rank {arr.ndim}")
    _require_finite(arr, "image")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("PGM export expects values in [0, 1]")
    h, w = arr.shape
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + data.tobytes(order="C"))
