"""Shared-weight encoder, twin decoders, and checkpoint serialization.

The encoder applies the same weights to every image of the series by
folding timestamps into the batch axis.  It emits a feature pyramid with
scales s = 0 .. S-1: level s has width base_width * 2^s at resolution
(H / 2^s, W / 2^s), captured before the next pooling step.

A decoder walks the pyramid back up: each step is a 2x2 transpose
convolution that doubles resolution and halves width, concatenation with
the matching skip level, and a ConvBlock.  A 1x1 convolution plus sigmoid
produces per-pixel probabilities.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, ConvBlock, MaxPool2x2, Sigmoid, TransposeConv2x2
from .rng import SeededRng
from .tensor import RASTER_MAGIC, RasterFormatError

CHECKPOINT_MAGIC = b"CKPT"


@dataclass(frozen=True)
class BackboneConfig:
    scales: int = 3
    base_width: int = 8
    in_channels: int = 3
    use_batchnorm: bool = True

    def __post_init__(self):
        if self.scales < 2:
            raise ValueError("need at least 2 pyramid scales")
        if self.base_width < 2:
            raise ValueError("base width must be at least 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    def width_at(self, scale: int) -> int:
        return self.base_width * (2 ** scale)


def pyramid_dims(cfg: BackboneConfig, height: int, width: int) -> list[tuple[int, int, int]]:
    """[(width_s, H_s, W_s)] per scale; validates divisibility by 2^(S-1)."""
    divisor = 2 ** (cfg.scales - 1)
    if height % divisor or width % divisor:
        raise ValueError(
            f"{height}x{width} input not divisible by {divisor} ({cfg.scales} scales)"
        )
    return [
        (cfg.width_at(s), height // (2 ** s), width // (2 ** s)) for s in range(cfg.scales)
    ]


class Encoder:
    """Timestamp-shared feature extractor returning the full pyramid."""

    def __init__(self, cfg: BackboneConfig, rng: SeededRng):
        self.cfg = cfg
        self.entry = ConvBlock(cfg.in_channels, cfg.base_width, cfg.use_batchnorm, rng)
        self.pools = []
        self.blocks = []
        for s in range(1, cfg.scales):
            self.pools.append(MaxPool2x2())
            self.blocks.append(
                ConvBlock(cfg.width_at(s - 1), cfg.width_at(s), cfg.use_batchnorm, rng)
            )

    def params(self):
        for name, p in self.entry.params():
            yield f"entry.{name}", p
        for i, block in enumerate(self.blocks):
            for name, p in block.params():
                yield f"down{i + 1}.{name}", p

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        pyramid_dims(self.cfg, x.shape[2], x.shape[3])
        feats = [self.entry.forward(x)]
        for pool, block in zip(self.pools, self.blocks):
            feats.append(block.forward(pool.forward(feats[-1])))
        return feats

    def backward(self, d_pyramid: list[np.ndarray]) -> np.ndarray:
        grad = d_pyramid[-1]
        for s in range(len(self.blocks) - 1, -1, -1):
            grad = self.pools[s].backward(self.blocks[s].backward(grad))
            grad = grad + d_pyramid[s]
        return self.entry.backward(grad)


class Decoder:
    """Pyramid-to-probability-map decoder with skip concatenation.

    The deepest pyramid level seeds the walk; levels S-2 .. 0 enter as
    skips.  Concatenation order is (upsampled, skip).
    """

    def __init__(self, cfg: BackboneConfig, rng: SeededRng):
        self.cfg = cfg
        self.ups = []
        self.blocks = []
        for s in range(cfg.scales - 2, -1, -1):
            self.ups.append(TransposeConv2x2(cfg.width_at(s + 1), cfg.width_at(s), rng))
            self.blocks.append(
                ConvBlock(2 * cfg.width_at(s), cfg.width_at(s), cfg.use_batchnorm, rng)
            )
        self.head = Conv2d(cfg.base_width, 1, 1, rng)
        self.squash = Sigmoid()
        self._split = None

    def params(self):
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            for name, p in up.params():
                yield f"up{i}.{name}", p
            for name, p in block.params():
                yield f"block{i}.{name}", p
        for name, p in self.head.params():
            yield f"head.{name}", p

    def forward(self, pyramid: list[np.ndarray]) -> np.ndarray:
        if len(pyramid) != self.cfg.scales:
            raise ValueError(f"expected {self.cfg.scales} pyramid levels, got {len(pyramid)}")
        self._split = []
        h = pyramid[-1]
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = pyramid[self.cfg.scales - 2 - i]
            u = up.forward(h)
            self._split.append(u.shape[1])
            h = block.forward(np.concatenate([u, skip], axis=1))
        return self.squash.forward(self.head.forward(h))[:, 0]

    def backward(self, d_out: np.ndarray) -> list[np.ndarray]:
        d_pyramid = [None] * self.cfg.scales
        g = self.head.backward(self.squash.backward(d_out[:, None]))
        for i in range(len(self.blocks) - 1, -1, -1):
            dcat = self.blocks[i].backward(g)
            split = self._split[i]
            du, dskip = dcat[:, :split], dcat[:, split:]
            d_pyramid[self.cfg.scales - 2 - i] = dskip
            g = self.ups[i].backward(du)
        d_pyramid[-1] = g
        return d_pyramid


def save_checkpoint(path: str, named_values: dict, meta: dict) -> None:
    """Single-file checkpoint: magic, JSON header, concatenated raster records.

    Layout: b"CKPT" | uint32-LE header length | UTF-8 JSON
    {"meta": ..., "index": [{"name", "offset", "shape"}, ...]} | records.
    Each record is a complete RTS1 raster; offsets are byte positions
    relative to the end of the header.  Values are stored float32.
    """
    records = []
    index = []
    offset = 0
    for name, value in named_values.items():
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} contains non-finite values")
        payload = arr.astype("<f4")
        rec = RASTER_MAGIC + struct.pack("<I", arr.ndim)
        rec += struct.pack(f"<{arr.ndim}I", *arr.shape)
        rec += payload.tobytes(order="C")
        index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        records.append(rec)
        offset += len(rec)
    header = json.dumps({"meta": meta, "index": index}, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(records)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Read back (meta, {name: float64 array}) from save_checkpoint's layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise RasterFormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise RasterFormatError(f"{path}: truncated checkpoint header")
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    body = blob[8 + hlen :]
    values = {}
    for entry in header["index"]:
        start = entry["offset"]
        if body[start : start + 4] != RASTER_MAGIC:
            raise RasterFormatError(f"{path}: bad record magic for {entry['name']}")
        (rank,) = struct.unpack("<I", body[start + 4 : start + 8])
        extents = struct.unpack(f"<{rank}I", body[start + 8 : start + 8 + 4 * rank])
        if list(extents) != [int(x) for x in entry["shape"]]:
            raise RasterFormatError(f"{path}: shape mismatch for {entry['name']}")
        count = 1
        for e in extents:
            count *= e
        data_start = start + 8 + 4 * rank
        flat = np.frombuffer(body, dtype="<f4", offset=data_start, count=count)
        values[entry["name"]] = flat.astype(np.float64).reshape(extents)
    return header["meta"], values
